//! Per-paper stage execution with resumable job state.
//!
//! Stages run ingest → gate → claims → grounding → qa → reground per paper,
//! then one corpus-level export. A re-invocation with the same run id skips
//! completed stages via their persisted artifacts; per-paper failures are
//! recorded in the job state without halting other papers.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use sciqa_core::claims::{
    extract_claims, ground_claims, route_claims, Claim, ClaimError, ExtractOptions, GroundOptions,
    RoutingPlan,
};
use sciqa_core::corpus::{build_context_units, classify_paper, ContextUnit, ParsedPaper};
use sciqa_core::export::{
    compute_stats, dedup, export_jsonl, render_stats_table, ExportLayout, SplitSpec,
};
use sciqa_core::gateway::{ApiKey, ChatBackend, Gateway, GatewayConfig, HttpBackend, MockBackend};
use sciqa_core::prompts::PromptLibrary;
use sciqa_core::qa::{
    generate_mqa, generate_tqa, generate_vqa, lint_question, vqa_category_for, GenOptions,
    QaError, QaItem,
};
use sciqa_core::reground::{assemble_training_instance, TrainingInstance};

use crate::config::{RunConfig, API_KEY_ENV};
use crate::state::{JobState, PaperState, Stage};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StopAfter {
    pub paper_id: String,
    pub stage: Stage,
}

impl std::str::FromStr for StopAfter {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (paper, stage) = s
            .rsplit_once(':')
            .ok_or_else(|| "expected <paper_id>:<stage>".to_string())?;
        Ok(Self {
            paper_id: paper.to_string(),
            stage: stage.parse()?,
        })
    }
}

#[derive(Debug, Default, Serialize, Deserialize)]
pub struct ClaimsArtifact {
    pub units: Vec<ContextUnit>,
    pub claims_by_unit: BTreeMap<String, Vec<Claim>>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
pub struct GroundedArtifact {
    pub plans: BTreeMap<String, RoutingPlan>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
pub struct QaArtifact {
    pub items: Vec<QaItem>,
    pub generated: usize,
    pub rejected_by_validation: usize,
    pub rejected_by_lint: usize,
    pub warnings: Vec<String>,
}

/// Gateway plus an optional handle onto the instrumented mock behind it.
pub struct GatewayHandle {
    pub gateway: Arc<Gateway>,
    pub mock: Option<Arc<MockBackend>>,
}

pub fn build_gateway(
    config: &RunConfig,
    backend_override: Option<Arc<dyn ChatBackend>>,
) -> GatewayHandle {
    let gateway_config = GatewayConfig {
        retries: config.retries,
        backoff_base_ms: if config.mock { 0 } else { 250 },
        max_concurrency: config.concurrency,
        cache_dir: config.cache_dir.clone(),
        max_requests: config.budgets.max_requests,
        max_output_tokens: config.budgets.max_output_tokens,
        repair_attempts: 3,
    };
    let (backend, mock): (Arc<dyn ChatBackend>, Option<Arc<MockBackend>>) =
        match backend_override {
            Some(backend) => (backend, None),
            None if config.mock => {
                let mock = Arc::new(MockBackend::deterministic());
                (mock.clone(), Some(mock))
            }
            None => {
                let key = ApiKey::from_env(API_KEY_ENV);
                if key.is_none() {
                    log::warn!("{API_KEY_ENV} not set; requests go out unauthenticated");
                }
                (
                    Arc::new(HttpBackend::new(
                        &config.endpoints.base_url,
                        key,
                        std::time::Duration::from_secs(120),
                    )),
                    None,
                )
            }
        };
    GatewayHandle {
        gateway: Arc::new(Gateway::new(backend, gateway_config)),
        mock,
    }
}

pub fn load_prompts(config: &RunConfig) -> anyhow::Result<Arc<PromptLibrary>> {
    Ok(Arc::new(match &config.templates_dir {
        Some(dir) => PromptLibrary::from_dir(dir)?,
        None => PromptLibrary::builtin(),
    }))
}

pub struct Pipeline {
    pub config: RunConfig,
    pub gateway: Arc<Gateway>,
    pub prompts: Arc<PromptLibrary>,
    pub run_dir: PathBuf,
}

fn safe_dir_name(paper_id: &str) -> String {
    let safe: String = paper_id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' })
        .collect();
    let digest = hex::encode(Sha256::digest(paper_id.as_bytes()));
    format!("{safe}_{}", &digest[..8])
}

fn read_artifact<T: DeserializeOwned>(path: &Path) -> anyhow::Result<T> {
    let bytes = std::fs::read(path)
        .map_err(|e| anyhow::anyhow!("missing artifact {}: {e}", path.display()))?;
    Ok(serde_json::from_slice(&bytes)?)
}

fn write_artifact<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, serde_json::to_vec_pretty(value)?)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

impl Pipeline {
    pub fn new(
        config: RunConfig,
        gateway: Arc<Gateway>,
        prompts: Arc<PromptLibrary>,
        run_id: &str,
    ) -> Self {
        let run_dir = config.runs_dir.join(run_id);
        Self {
            config,
            gateway,
            prompts,
            run_dir,
        }
    }

    fn state_path(&self) -> PathBuf {
        self.run_dir.join("state.json")
    }

    fn paper_dir(&self, paper_id: &str) -> PathBuf {
        self.run_dir.join("papers").join(safe_dir_name(paper_id))
    }

    fn load_or_init_state(&self, run_id: &str) -> anyhow::Result<JobState> {
        let path = self.state_path();
        if path.exists() {
            let state = JobState::load(&path)?;
            if state.config_hash != self.config.semantic_hash() {
                anyhow::bail!(
                    "config hash mismatch for run '{run_id}': state has {}, current config is {} \
                     (start a new run id or restore the original config)",
                    state.config_hash,
                    self.config.semantic_hash()
                );
            }
            Ok(state)
        } else {
            Ok(JobState::new(run_id, &self.config.semantic_hash()))
        }
    }

    /// Execute the pipeline up to `target` for every input paper.
    pub fn run(
        &self,
        paper_files: &[PathBuf],
        run_id: &str,
        target: Stage,
        stop_after: Option<&StopAfter>,
    ) -> anyhow::Result<JobState> {
        let state = Mutex::new(self.load_or_init_state(run_id)?);
        std::fs::create_dir_all(&self.run_dir)?;

        // Ingest serially: parse, validate, persist the normalized paper.
        let mut paper_ids: Vec<String> = Vec::new();
        for file in paper_files {
            match sciqa_core::corpus::load_parsed_paper(file) {
                Ok(paper) => {
                    let paper_id = paper.paper_id.clone();
                    let mut guard = state.lock().expect("state poisoned");
                    let done = guard
                        .per_paper
                        .get(&paper_id)
                        .is_some_and(|p| p.completed(Stage::Ingested));
                    if !done {
                        let path = self.paper_dir(&paper_id).join("ingested.json");
                        write_artifact(&path, &paper)?;
                        guard.advance(&paper_id, Stage::Ingested, Some(path));
                        guard.save(&self.state_path())?;
                    }
                    paper_ids.push(paper_id);
                }
                Err(e) => {
                    let mut guard = state.lock().expect("state poisoned");
                    let key = file.display().to_string();
                    guard.record_error(&key, format!("ingest failed: {e}"));
                    guard.save(&self.state_path())?;
                }
            }
        }
        paper_ids.sort();
        paper_ids.dedup();

        if target > Stage::Ingested {
            let per_paper_target = target.min(Stage::Regrounded);
            let next = AtomicUsize::new(0);
            let workers = self.config.workers.max(1).min(paper_ids.len().max(1));
            std::thread::scope(|scope| {
                for _ in 0..workers {
                    scope.spawn(|| loop {
                        let i = next.fetch_add(1, Ordering::SeqCst);
                        let Some(paper_id) = paper_ids.get(i) else {
                            break;
                        };
                        let rank = i; // paper_ids is sorted; index is the rank
                        if let Err(e) =
                            self.advance_paper(&state, paper_id, rank, per_paper_target, stop_after)
                        {
                            let mut guard = state.lock().expect("state poisoned");
                            guard.record_error(paper_id, e.to_string());
                            let _ = guard.save(&self.state_path());
                        }
                    });
                }
            });
        }

        if target == Stage::Exported {
            self.export_corpus(&state, &paper_ids)?;
        }

        let guard = state.lock().expect("state poisoned");
        guard.save(&self.state_path())?;
        Ok(guard.clone())
    }

    fn snapshot(&self, state: &Mutex<JobState>, paper_id: &str) -> PaperState {
        state
            .lock()
            .expect("state poisoned")
            .per_paper
            .get(paper_id)
            .cloned()
            .unwrap_or_default()
    }

    fn advance_paper(
        &self,
        state: &Mutex<JobState>,
        paper_id: &str,
        rank: usize,
        target: Stage,
        stop_after: Option<&StopAfter>,
    ) -> anyhow::Result<()> {
        let dir = self.paper_dir(paper_id);
        let paper: ParsedPaper = read_artifact(&dir.join("ingested.json"))?;

        for stage in [
            Stage::Gated,
            Stage::Claims,
            Stage::Grounded,
            Stage::Qa,
            Stage::Regrounded,
        ] {
            if stage > target {
                break;
            }
            let snapshot = self.snapshot(state, paper_id);
            if snapshot.gated_out {
                break;
            }
            if !snapshot.completed(stage) {
                let artifact = match stage {
                    Stage::Gated => self.stage_gate(&paper, &dir, state, paper_id)?,
                    Stage::Claims => self.stage_claims(&paper, &dir)?,
                    Stage::Grounded => self.stage_grounded(&paper, &dir)?,
                    Stage::Qa => self.stage_qa(&paper, &dir, rank)?,
                    Stage::Regrounded => self.stage_reground(&paper, &dir)?,
                    _ => unreachable!("per-paper stages only"),
                };
                let mut guard = state.lock().expect("state poisoned");
                guard.advance(paper_id, stage, artifact);
                guard.save(&self.state_path())?;
            }
            if stop_after.is_some_and(|s| s.paper_id == paper_id && s.stage == stage) {
                log::info!("stop-after hit for {paper_id} at {}", stage.as_str());
                return Ok(());
            }
        }
        Ok(())
    }

    fn stage_gate(
        &self,
        paper: &ParsedPaper,
        dir: &Path,
        state: &Mutex<JobState>,
        paper_id: &str,
    ) -> anyhow::Result<Option<PathBuf>> {
        let verdict = classify_paper(
            paper,
            &self.gateway,
            &self.prompts,
            &self.config.endpoints.gate_model,
        )?;
        let path = dir.join("gate.json");
        write_artifact(&path, &verdict)?;
        if !verdict.is_experimental {
            let mut guard = state.lock().expect("state poisoned");
            let entry = guard.per_paper.entry(paper_id.to_string()).or_default();
            entry.gated_out = true;
            log::info!("paper {paper_id} gated out: {}", verdict.rationale);
        }
        Ok(Some(path))
    }

    fn extract_options(&self) -> ExtractOptions {
        ExtractOptions {
            model_id: self.config.endpoints.generator_model.clone(),
            temperature: self.config.temperature_generation,
            max_output_tokens: 2048,
            max_claims: sciqa_core::claims::MAX_CLAIMS_PER_UNIT,
        }
    }

    fn gen_options(&self) -> GenOptions {
        GenOptions {
            model_id: self.config.endpoints.generator_model.clone(),
            temperature: self.config.temperature_generation,
            max_output_tokens: 4096,
            samples_per_claim: self.config.samples_per_claim,
        }
    }

    fn stage_claims(&self, paper: &ParsedPaper, dir: &Path) -> anyhow::Result<Option<PathBuf>> {
        let units = build_context_units(paper);
        let mut artifact = ClaimsArtifact {
            units,
            ..ClaimsArtifact::default()
        };
        let options = self.extract_options();
        for unit in &artifact.units {
            match extract_claims(unit, paper, &self.gateway, &self.prompts, &options) {
                Ok(claims) => {
                    artifact.claims_by_unit.insert(unit.unit_id.clone(), claims);
                }
                Err(ClaimError::AllClaimsRejected { total, .. }) => {
                    artifact.warnings.push(format!(
                        "{}: all {total} extracted claims rejected",
                        unit.unit_id
                    ));
                }
                Err(e) => return Err(e.into()),
            }
        }
        let path = dir.join("claims.json");
        write_artifact(&path, &artifact)?;
        Ok(Some(path))
    }

    fn stage_grounded(&self, paper: &ParsedPaper, dir: &Path) -> anyhow::Result<Option<PathBuf>> {
        let claims: ClaimsArtifact = read_artifact(&dir.join("claims.json"))?;
        let mut artifact = GroundedArtifact::default();
        let options = GroundOptions {
            model_id: self.config.endpoints.generator_model.clone(),
            temperature: self.config.temperature_generation,
            max_output_tokens: 4096,
        };
        for unit in &claims.units {
            let Some(unit_claims) = claims.claims_by_unit.get(&unit.unit_id) else {
                continue;
            };
            if unit_claims.is_empty() {
                continue;
            }
            let Some(visual) = paper.visual(&unit.visual_id) else {
                continue;
            };
            match ground_claims(unit_claims, visual, &self.gateway, &self.prompts, &options) {
                Ok(grounded) => {
                    artifact
                        .plans
                        .insert(unit.unit_id.clone(), route_claims(grounded));
                }
                Err(ClaimError::StructureMismatch(detail)) => {
                    artifact
                        .warnings
                        .push(format!("{}: grounding drifted: {detail}", unit.unit_id));
                }
                Err(e) => return Err(e.into()),
            }
        }
        let path = dir.join("grounded.json");
        write_artifact(&path, &artifact)?;
        Ok(Some(path))
    }

    fn stage_qa(
        &self,
        paper: &ParsedPaper,
        dir: &Path,
        rank: usize,
    ) -> anyhow::Result<Option<PathBuf>> {
        let claims: ClaimsArtifact = read_artifact(&dir.join("claims.json"))?;
        let grounded: GroundedArtifact = read_artifact(&dir.join("grounded.json"))?;
        let mut artifact = QaArtifact::default();
        let mut quarantine: Vec<serde_json::Value> = Vec::new();
        let options = self.gen_options();

        let mut candidates: Vec<QaItem> = Vec::new();
        for unit in &claims.units {
            let Some(plan) = grounded.plans.get(&unit.unit_id) else {
                continue;
            };
            if !plan.tqa_claims.is_empty() {
                match generate_tqa(
                    &plan.tqa_claims,
                    unit,
                    paper,
                    &self.gateway,
                    &self.prompts,
                    &options,
                ) {
                    Ok(outcome) => {
                        artifact.generated += outcome.items.len() + outcome.rejected.len();
                        artifact.rejected_by_validation += outcome.rejected.len();
                        for reject in &outcome.rejected {
                            quarantine.push(json!({
                                "qa_id": reject.qa_id,
                                "violations": reject.reasons,
                                "raw_output": reject.raw_output,
                            }));
                        }
                        candidates.extend(outcome.items);
                    }
                    Err(QaError::AllItemsRejected { total }) => {
                        artifact
                            .warnings
                            .push(format!("{}: all {total} TQA items rejected", unit.unit_id));
                    }
                    Err(e) => return Err(e.into()),
                }
            }
            if !plan.mqa_claims.is_empty() {
                match generate_mqa(
                    &plan.mqa_claims,
                    unit,
                    paper,
                    &self.gateway,
                    &self.prompts,
                    &options,
                ) {
                    Ok(outcome) => {
                        artifact.generated += outcome.items.len() + outcome.rejected.len();
                        artifact.rejected_by_validation += outcome.rejected.len();
                        for reject in &outcome.rejected {
                            quarantine.push(json!({
                                "qa_id": reject.qa_id,
                                "violations": reject.reasons,
                                "raw_output": reject.raw_output,
                            }));
                        }
                        candidates.extend(outcome.items);
                    }
                    Err(QaError::AllItemsRejected { total }) => {
                        artifact
                            .warnings
                            .push(format!("{}: all {total} MQA items rejected", unit.unit_id));
                    }
                    Err(e) => return Err(e.into()),
                }
            }
        }

        for (index, visual) in paper.visuals.iter().enumerate() {
            if visual.image_ref.trim().is_empty() {
                continue;
            }
            let category = vqa_category_for(rank, index);
            match generate_vqa(
                visual,
                &visual.caption,
                category,
                &paper.paper_id,
                &self.gateway,
                &self.prompts,
                &options,
            ) {
                Ok(item) => {
                    artifact.generated += 1;
                    candidates.push(item);
                }
                Err(QaError::Gateway(sciqa_core::gateway::GatewayError::UnparsableOutput {
                    ..
                })) => {
                    artifact
                        .warnings
                        .push(format!("{}: VQA output unusable", visual.visual_id));
                }
                Err(e) => return Err(e.into()),
            }
        }

        for item in candidates {
            let report = lint_question(&item);
            if report.passes() {
                artifact.items.push(item);
            } else {
                artifact.rejected_by_lint += 1;
                quarantine.push(json!({
                    "qa_id": report.qa_id,
                    "violations": report.violations,
                    "raw_output": serde_json::to_value(&item)?,
                }));
            }
        }

        if !quarantine.is_empty() {
            let mut lines = String::new();
            for entry in &quarantine {
                lines.push_str(&entry.to_string());
                lines.push('\n');
            }
            std::fs::write(dir.join("quarantine.jsonl"), lines)?;
        }
        let path = dir.join("qa.json");
        write_artifact(&path, &artifact)?;
        Ok(Some(path))
    }

    fn stage_reground(&self, paper: &ParsedPaper, dir: &Path) -> anyhow::Result<Option<PathBuf>> {
        let qa: QaArtifact = read_artifact(&dir.join("qa.json"))?;
        let budget = self.config.packing.budget();
        let mut instances: Vec<TrainingInstance> = Vec::new();
        let mut warnings: Vec<String> = Vec::new();
        for item in &qa.items {
            match assemble_training_instance(item, paper, &budget) {
                Ok(instance) => instances.push(instance),
                Err(e) => warnings.push(format!("{}: {e}", item.qa_id)),
            }
        }
        let path = dir.join("instances.json");
        write_artifact(&path, &instances)?;
        if !warnings.is_empty() {
            write_artifact(&dir.join("reground_warnings.json"), &warnings)?;
        }
        Ok(Some(path))
    }

    fn export_corpus(
        &self,
        state: &Mutex<JobState>,
        paper_ids: &[String],
    ) -> anyhow::Result<()> {
        let ready: Vec<String> = {
            let guard = state.lock().expect("state poisoned");
            paper_ids
                .iter()
                .filter(|id| {
                    guard
                        .per_paper
                        .get(*id)
                        .is_some_and(|p| p.completed(Stage::Regrounded) && p.error.is_none())
                })
                .cloned()
                .collect()
        };

        let mut all: Vec<TrainingInstance> = Vec::new();
        for paper_id in &ready {
            let path = self.paper_dir(paper_id).join("instances.json");
            let instances: Vec<TrainingInstance> = read_artifact(&path)?;
            all.extend(instances);
        }
        let deduped = dedup(all);

        let spec = if self.config.split.is_empty() {
            SplitSpec::single("train")
        } else {
            SplitSpec {
                fractions: self.config.split.clone(),
                seed: self.config.seed,
            }
        };
        let splits = sciqa_core::export::split(deduped.clone(), &spec)?;
        std::fs::create_dir_all(&self.config.out_dir)?;
        let mut manifest_path = self.config.out_dir.join("manifest.json");
        for (name, items) in &splits {
            let split_dir = self.config.out_dir.join(name);
            export_jsonl(
                items,
                ExportLayout::ByKind,
                &split_dir,
                &self.config.image_root,
                self.config.manifest_echo(),
            )?;
            manifest_path = split_dir.join("manifest.json");
        }

        let stats = compute_stats(&deduped);
        write_artifact(&self.config.out_dir.join("stats.json"), &stats)?;
        std::fs::write(
            self.config.out_dir.join("stats.txt"),
            render_stats_table(&stats),
        )?;

        let mut guard = state.lock().expect("state poisoned");
        for paper_id in &ready {
            guard.advance(paper_id, Stage::Exported, Some(manifest_path.clone()));
        }
        guard.save(&self.state_path())?;
        Ok(())
    }

    /// All regrounded instances across the run, in sorted paper order.
    pub fn load_all_instances(&self, state: &JobState) -> anyhow::Result<Vec<TrainingInstance>> {
        let mut all = Vec::new();
        for (paper_id, paper_state) in &state.per_paper {
            if paper_state.completed(Stage::Regrounded) {
                let path = self.paper_dir(paper_id).join("instances.json");
                let instances: Vec<TrainingInstance> = read_artifact(&path)?;
                all.extend(instances);
            }
        }
        Ok(all)
    }
}

/// Planned work for `--dry-run`: counts and a request/cost estimate, no
/// gateway traffic.
#[derive(Debug, Serialize)]
pub struct DryRunPlan {
    pub papers: usize,
    pub units: usize,
    pub visuals: usize,
    pub estimated_requests: u64,
    pub estimated_output_tokens: u64,
}

pub fn plan_dry_run(paper_files: &[PathBuf], samples_per_claim: u32) -> anyhow::Result<DryRunPlan> {
    let mut papers = 0usize;
    let mut units = 0usize;
    let mut visuals = 0usize;
    for file in paper_files {
        let paper = sciqa_core::corpus::load_parsed_paper(file)?;
        papers += 1;
        units += build_context_units(&paper).len();
        visuals += paper
            .visuals
            .iter()
            .filter(|v| !v.image_ref.trim().is_empty())
            .count();
    }
    let s = samples_per_claim.max(1) as u64;
    // gate + claims + grounding per unit + tqa/mqa rounds per unit + vqa per visual
    let estimated_requests =
        papers as u64 + units as u64 * (2 + 2 * s) + visuals as u64;
    Ok(DryRunPlan {
        papers,
        units,
        visuals,
        estimated_requests,
        estimated_output_tokens: estimated_requests * 4096,
    })
}

pub fn render_dry_run(plan: &DryRunPlan) -> String {
    format!(
        "papers: {}\ncontext units: {}\nvisuals: {}\nestimated requests: {}\n\
         estimated output-token ceiling: {}\n",
        plan.papers, plan.units, plan.visuals, plan.estimated_requests, plan.estimated_output_tokens
    )
}

/// Expand a papers argument: a directory (all *.json inside, sorted), a
/// single file, or a glob-free comma list.
pub fn collect_paper_files(spec: &str) -> anyhow::Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for part in spec.split(',') {
        let path = PathBuf::from(part.trim());
        if path.is_dir() {
            let mut entries: Vec<PathBuf> = std::fs::read_dir(&path)?
                .filter_map(|e| e.ok())
                .map(|e| e.path())
                .filter(|p| p.extension().is_some_and(|ext| ext == "json"))
                .collect();
            entries.sort();
            files.extend(entries);
        } else if path.is_file() {
            files.push(path);
        } else {
            anyhow::bail!("papers path '{}' does not exist", path.display());
        }
    }
    if files.is_empty() {
        anyhow::bail!("no paper files found under '{spec}'");
    }
    Ok(files)
}
