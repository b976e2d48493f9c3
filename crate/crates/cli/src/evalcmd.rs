//! Evaluation commands: run a model over benchmark items, judge the
//! responses, and render reports.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use sciqa_core::corpus::ParsedPaper;
use sciqa_core::eval::{
    aggregate, judge_response, load_eval_items, render_report_table, run_benchmark, tag_failures,
    EvalItem, EvalReport, FailureTag, JudgeOptions, ModelResponse, RunOptions, ScoredItem,
};
use sciqa_core::gateway::Gateway;
use sciqa_core::prompts::PromptLibrary;
use sciqa_core::reground::NoiseSetting;

use crate::config::RunConfig;
use crate::pipeline::collect_paper_files;

pub fn load_papers_map(spec: &str) -> anyhow::Result<BTreeMap<String, ParsedPaper>> {
    let mut papers = BTreeMap::new();
    for file in collect_paper_files(spec)? {
        let paper = sciqa_core::corpus::load_parsed_paper(&file)?;
        papers.insert(paper.paper_id.clone(), paper);
    }
    Ok(papers)
}

pub fn read_eval_items(path: &Path) -> anyhow::Result<Vec<EvalItem>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| anyhow::anyhow!("cannot read items {}: {e}", path.display()))?;
    load_eval_items(&text).map_err(|e| anyhow::anyhow!("bad eval items: {e}"))
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> anyhow::Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut out = String::new();
    for row in rows {
        out.push_str(&serde_json::to_string(row)?);
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> anyhow::Result<Vec<T>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| anyhow::anyhow!("cannot read {}: {e}", path.display()))?;
    let mut rows = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        rows.push(
            serde_json::from_str(line)
                .map_err(|e| anyhow::anyhow!("{}:{}: {e}", path.display(), lineno + 1))?,
        );
    }
    Ok(rows)
}

pub fn cmd_evaluate(
    config: &RunConfig,
    gateway: &Gateway,
    items_path: &Path,
    papers_spec: &str,
    setting: NoiseSetting,
    seed: u64,
    model_id: &str,
    out: &Path,
) -> anyhow::Result<usize> {
    let items = read_eval_items(items_path)?;
    let papers = load_papers_map(papers_spec)?;
    let options = RunOptions {
        model_id: model_id.to_string(),
        temperature: 0.0,
        max_output_tokens: 2048,
    };
    let responses = run_benchmark(&items, &papers, gateway, &options, setting, seed);
    let failures = responses.iter().filter(|r| r.error.is_some()).count();
    write_jsonl(out, &responses)?;
    let _ = config;
    Ok(failures)
}

pub fn cmd_judge(
    config: &RunConfig,
    gateway: &Gateway,
    prompts: &PromptLibrary,
    items_path: &Path,
    responses_path: &Path,
    out: &Path,
) -> anyhow::Result<usize> {
    let judge_model = config.require_judge_model()?;
    let items = read_eval_items(items_path)?;
    let by_id: BTreeMap<&str, &EvalItem> =
        items.iter().map(|i| (i.item_id.as_str(), i)).collect();
    let responses: Vec<ModelResponse> = read_jsonl(responses_path)?;
    let options = JudgeOptions {
        model_id: judge_model.to_string(),
        max_output_tokens: 1024,
    };
    let mut scored = Vec::new();
    let mut failures = 0usize;
    for response in &responses {
        let Some(item) = by_id.get(response.item_id.as_str()) else {
            log::warn!("response for unknown item '{}' skipped", response.item_id);
            failures += 1;
            continue;
        };
        match judge_response(item, &response.response, gateway, prompts, &options) {
            Ok(score) => scored.push(ScoredItem {
                item_id: item.item_id.clone(),
                question_type: item.question_type,
                setting: response.setting,
                score,
            }),
            Err(e) => {
                log::warn!("judging {} failed: {e}", item.item_id);
                failures += 1;
            }
        }
    }
    write_jsonl(out, &scored)?;
    Ok(failures)
}

#[derive(Debug, Serialize)]
pub struct ReportDocument {
    pub reports: Vec<EvalReport>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub failure_tags: Vec<Option<FailureTag>>,
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_report(
    config: &RunConfig,
    gateway: &Gateway,
    prompts: &PromptLibrary,
    score_paths: &[PathBuf],
    out: &Path,
    text_out: Option<&Path>,
    tag: bool,
    items_path: Option<&Path>,
    responses_path: Option<&Path>,
) -> anyhow::Result<String> {
    let mut scored: Vec<ScoredItem> = Vec::new();
    for path in score_paths {
        scored.extend(read_jsonl::<ScoredItem>(path)?);
    }
    let mut by_setting: BTreeMap<NoiseSetting, Vec<ScoredItem>> = BTreeMap::new();
    for item in scored.iter().cloned() {
        by_setting.entry(item.setting).or_default().push(item);
    }
    let mut reports: Vec<EvalReport> = by_setting
        .iter()
        .map(|(setting, items)| aggregate(items, Some(*setting)))
        .collect();
    if reports.len() > 1 {
        reports.push(aggregate(&scored, None));
    }

    let mut failure_tags = Vec::new();
    if tag {
        let judge_model = config.require_judge_model()?;
        let items_path =
            items_path.ok_or_else(|| anyhow::anyhow!("--tag-failures requires --items"))?;
        let responses_path = responses_path
            .ok_or_else(|| anyhow::anyhow!("--tag-failures requires --responses"))?;
        let items = read_eval_items(items_path)?;
        let by_id: BTreeMap<&str, &EvalItem> =
            items.iter().map(|i| (i.item_id.as_str(), i)).collect();
        let responses: Vec<ModelResponse> = read_jsonl(responses_path)?;
        let response_by_id: BTreeMap<&str, &ModelResponse> =
            responses.iter().map(|r| (r.item_id.as_str(), r)).collect();
        let wrong: Vec<(EvalItem, String)> = scored
            .iter()
            .filter(|s| !s.score.binary_correct)
            .filter_map(|s| {
                let item = by_id.get(s.item_id.as_str())?;
                let response = response_by_id.get(s.item_id.as_str())?;
                Some(((*item).clone(), response.response.clone()))
            })
            .collect();
        let options = JudgeOptions {
            model_id: judge_model.to_string(),
            max_output_tokens: 512,
        };
        failure_tags = tag_failures(&wrong, gateway, prompts, &options);
    }

    let table = render_report_table(&reports);
    let document = ReportDocument {
        reports,
        failure_tags,
    };
    if let Some(parent) = out.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(out, serde_json::to_vec_pretty(&document)?)?;
    if let Some(text_path) = text_out {
        std::fs::write(text_path, &table)?;
    }
    Ok(table)
}
