//! SFT-ready serialization: dedup, corpus statistics, JSON-lines export with
//! a manifest, and paper-granular splits.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::qa::QaKind;
use crate::reground::{render_target, TrainingInstance};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub counts: BTreeMap<String, u64>,
    pub counts_by_type: BTreeMap<String, u64>,
    pub papers: u64,
    pub total: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub fractions: BTreeMap<String, f64>,
    pub seed: u64,
}

impl SplitSpec {
    pub fn single(name: &str) -> Self {
        let mut fractions = BTreeMap::new();
        fractions.insert(name.to_string(), 1.0);
        Self { fractions, seed: 0 }
    }

    pub fn validate(&self) -> Result<(), ExportError> {
        if self.fractions.is_empty() {
            return Err(ExportError::InvalidSplitSpec("no splits given".into()));
        }
        let sum: f64 = self.fractions.values().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(ExportError::InvalidSplitSpec(format!(
                "fractions sum to {sum}, expected 1.0"
            )));
        }
        for (name, f) in &self.fractions {
            if !(*f > 0.0 && *f <= 1.0) {
                return Err(ExportError::InvalidSplitSpec(format!(
                    "fraction for '{name}' is {f}, expected (0, 1]"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExportLayout {
    ByKind,
    Single,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestFile {
    pub file: String,
    pub count: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub image_root: String,
    pub files: Vec<ManifestFile>,
    pub total: u64,
    pub config_echo: Value,
}

#[derive(Debug, thiserror::Error)]
pub enum ExportError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("serialization failed: {0}")]
    Serialization(#[from] serde_json::Error),
    #[error("invalid split spec: {0}")]
    InvalidSplitSpec(String),
}

fn io_err(path: &Path, source: std::io::Error) -> ExportError {
    ExportError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Dedup key normalization: lowercase, collapse whitespace, strip trailing
/// punctuation.
pub fn normalize_question(q: &str) -> String {
    let collapsed = q.to_lowercase().split_whitespace().collect::<Vec<_>>().join(" ");
    collapsed
        .trim_end_matches(['.', '?', '!', ';', ':', ','])
        .to_string()
}

/// Remove instances whose normalized question and evidence set both match an
/// earlier instance. Order-stable and idempotent.
pub fn dedup(items: Vec<TrainingInstance>) -> Vec<TrainingInstance> {
    let mut seen: HashSet<(String, BTreeSet<String>)> = HashSet::new();
    items
        .into_iter()
        .filter(|item| {
            seen.insert((
                normalize_question(&item.question),
                item.context.evidence_mask.clone(),
            ))
        })
        .collect()
}

pub fn compute_stats(items: &[TrainingInstance]) -> CorpusStats {
    let mut counts: BTreeMap<String, u64> = BTreeMap::new();
    let mut counts_by_type: BTreeMap<String, u64> = BTreeMap::new();
    let mut papers: BTreeSet<&str> = BTreeSet::new();
    for item in items {
        *counts.entry(item.kind.as_str().to_string()).or_default() += 1;
        *counts_by_type.entry(item.meta.question_type.clone()).or_default() += 1;
        papers.insert(item.meta.paper_id.as_str());
    }
    CorpusStats {
        counts,
        counts_by_type,
        papers: papers.len() as u64,
        total: items.len() as u64,
    }
}

const KIND_DESCRIPTIONS: &[(&str, &str)] = &[
    ("TQA", "Answerable solely from textual context"),
    ("VQA", "Answerable solely from figures/tables"),
    ("MQA", "Requires synthesis of text and visuals"),
];

/// Render the stats report as a category/description/count table with a
/// closing total row, plus a per-question-type breakdown.
pub fn render_stats_table(stats: &CorpusStats) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<10}{:<44}{:>10}\n",
        "Category", "Description", "Count"
    ));
    out.push_str(&"-".repeat(64));
    out.push('\n');
    for (kind, description) in KIND_DESCRIPTIONS {
        let count = stats.counts.get(*kind).copied().unwrap_or(0);
        out.push_str(&format!("{kind:<10}{description:<44}{count:>10}\n"));
    }
    out.push_str(&"-".repeat(64));
    out.push('\n');
    out.push_str(&format!("{:<10}{:<44}{:>10}\n", "Total", "", stats.total));
    out.push('\n');
    out.push_str(&format!("Papers: {}\n", stats.papers));
    out.push_str("By question type:\n");
    for (qtype, count) in &stats.counts_by_type {
        out.push_str(&format!("  {qtype:<28}{count:>10}\n"));
    }
    out
}

/// One exported record: the chat-style input with image placeholders
/// interleaved at their document positions, plus the rendered target.
pub fn render_record(instance: &TrainingInstance, image_root: &str) -> Value {
    // Paragraphs first in document order, then each image with its caption,
    // then the question. Both packed lists are already document-ordered.
    let mut parts: Vec<Value> = Vec::new();
    for (_, text) in &instance.context.paragraphs {
        parts.push(json!({"type": "text", "text": text}));
    }
    for image in &instance.context.images {
        let path = image
            .image_ref
            .strip_prefix(image_root)
            .map(|p| p.trim_start_matches('/'))
            .unwrap_or(image.image_ref.as_str());
        parts.push(json!({"type": "image", "image": path}));
        if !image.caption.trim().is_empty() {
            parts.push(json!({"type": "text", "text": image.caption}));
        }
    }
    parts.push(json!({"type": "text", "text": format!("Question: {}", instance.question)}));
    json!({
        "id": instance.instance_id,
        "messages": [{"role": "user", "content": parts}],
        "target": render_target(&instance.target),
    })
}

fn kind_file_name(kind: QaKind) -> &'static str {
    match kind {
        QaKind::Tqa => "tqa.jsonl",
        QaKind::Vqa => "vqa.jsonl",
        QaKind::Mqa => "mqa.jsonl",
    }
}

/// Write instances as JSON-lines under `out_dir` and return the manifest
/// (also written as `manifest.json`). Identical corpus and config produce
/// byte-identical files.
pub fn export_jsonl(
    items: &[TrainingInstance],
    layout: ExportLayout,
    out_dir: &Path,
    image_root: &str,
    config_echo: Value,
) -> Result<Manifest, ExportError> {
    std::fs::create_dir_all(out_dir).map_err(|e| io_err(out_dir, e))?;
    let mut buckets: BTreeMap<&'static str, Vec<&TrainingInstance>> = BTreeMap::new();
    match layout {
        ExportLayout::Single => {
            buckets.insert("instances.jsonl", items.iter().collect());
        }
        ExportLayout::ByKind => {
            for kind in [QaKind::Tqa, QaKind::Vqa, QaKind::Mqa] {
                buckets.insert(
                    kind_file_name(kind),
                    items.iter().filter(|i| i.kind == kind).collect(),
                );
            }
        }
    }

    let mut files = Vec::new();
    for (name, bucket) in &buckets {
        let path = out_dir.join(name);
        let mut buf = Vec::new();
        for instance in bucket {
            let record = render_record(instance, image_root);
            serde_json::to_writer(&mut buf, &record)?;
            buf.push(b'\n');
        }
        std::fs::write(&path, &buf).map_err(|e| io_err(&path, e))?;
        files.push(ManifestFile {
            file: (*name).to_string(),
            count: bucket.len() as u64,
            sha256: hex::encode(Sha256::digest(&buf)),
        });
    }

    let manifest = Manifest {
        schema_version: 1,
        image_root: image_root.to_string(),
        files,
        total: items.len() as u64,
        config_echo,
    };
    let path = out_dir.join("manifest.json");
    let mut f = std::fs::File::create(&path).map_err(|e| io_err(&path, e))?;
    let bytes = serde_json::to_vec_pretty(&manifest)?;
    f.write_all(&bytes).map_err(|e| io_err(&path, e))?;
    f.write_all(b"\n").map_err(|e| io_err(&path, e))?;
    Ok(manifest)
}

fn paper_rank(paper_id: &str, seed: u64) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(paper_id.as_bytes());
    h.update([0x1f]);
    h.update(seed.to_le_bytes());
    h.finalize().into()
}

/// Split instances by paper: all of a paper's items land in one split.
/// Papers are ordered by a seeded hash and apportioned to splits by largest
/// remainder, so fractions are approximate at paper granularity.
pub fn split(
    items: Vec<TrainingInstance>,
    spec: &SplitSpec,
) -> Result<BTreeMap<String, Vec<TrainingInstance>>, ExportError> {
    spec.validate()?;
    let mut papers: Vec<String> = Vec::new();
    let mut seen = HashSet::new();
    for item in &items {
        if seen.insert(item.meta.paper_id.clone()) {
            papers.push(item.meta.paper_id.clone());
        }
    }
    papers.sort();
    papers.sort_by_key(|p| paper_rank(p, spec.seed));

    // Largest-remainder apportionment over paper count.
    let n = papers.len();
    let mut order: Vec<(&String, &f64)> = spec.fractions.iter().collect();
    order.sort_by(|a, b| b.1.total_cmp(a.1).then(a.0.cmp(b.0)));
    let mut quota: Vec<(String, usize, f64)> = order
        .iter()
        .map(|(name, f)| {
            let exact = *f * n as f64;
            ((*name).clone(), exact.floor() as usize, exact - exact.floor())
        })
        .collect();
    let assigned: usize = quota.iter().map(|(_, q, _)| q).sum();
    let mut leftover = n - assigned;
    quota.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)));
    for entry in quota.iter_mut() {
        if leftover == 0 {
            break;
        }
        entry.1 += 1;
        leftover -= 1;
    }
    // Restore descending-fraction order for contiguous assignment.
    quota.sort_by_key(|(name, _, _)| {
        order
            .iter()
            .position(|(n2, _)| *n2 == name)
            .expect("split name")
    });

    let mut assignment: BTreeMap<&str, String> = BTreeMap::new();
    let mut cursor = 0usize;
    for (name, count, _) in &quota {
        for paper in papers.iter().skip(cursor).take(*count) {
            assignment.insert(paper.as_str(), name.clone());
        }
        cursor += count;
    }

    let mut out: BTreeMap<String, Vec<TrainingInstance>> = spec
        .fractions
        .keys()
        .map(|name| (name.clone(), Vec::new()))
        .collect();
    for item in items {
        let split_name = assignment
            .get(item.meta.paper_id.as_str())
            .expect("every paper assigned")
            .clone();
        out.get_mut(&split_name).expect("split exists").push(item);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::qa::ReasoningChain;
    use crate::reground::{
        InstanceMeta, LocalizationStep, PackedContext, PackedImage, TrainingTarget,
    };

    fn instance(id: &str, paper: &str, kind: QaKind, qtype: &str, question: &str) -> TrainingInstance {
        let mut evidence_mask = BTreeSet::new();
        evidence_mask.insert("p1".to_string());
        TrainingInstance {
            instance_id: id.to_string(),
            question: question.to_string(),
            context: PackedContext {
                paragraphs: vec![("p1".into(), "Some paragraph text.".into())],
                images: vec![PackedImage {
                    visual_id: "v1".into(),
                    image_ref: "/data/images/v1.png".into(),
                    caption: "A caption.".into(),
                }],
                evidence_mask,
            },
            target: TrainingTarget {
                localization: LocalizationStep {
                    text: "To answer this question, I need to first consult Section 1.".into(),
                    identifiers: vec![],
                },
                reasoning: ReasoningChain {
                    understand_question: None,
                    steps: vec![],
                    conclusion: "Done.".into(),
                    vqa_fields: None,
                    evidence_citations: None,
                },
                final_answer: "Done.".into(),
            },
            kind,
            meta: InstanceMeta {
                paper_id: paper.to_string(),
                qa_id: id.to_string(),
                question_type: qtype.to_string(),
            },
        }
    }

    #[test]
    fn dedup_keeps_first_of_identical_pairs() {
        let a = instance("a", "p1", QaKind::Tqa, "CausalReasoning", "Why does X hold?");
        let b = instance("b", "p1", QaKind::Tqa, "CausalReasoning", "why does x hold");
        let out = dedup(vec![a.clone(), b]);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].instance_id, "a");
    }

    #[test]
    fn dedup_differentiates_by_evidence() {
        let a = instance("a", "p1", QaKind::Tqa, "CausalReasoning", "Why does X hold?");
        let mut b = instance("b", "p1", QaKind::Tqa, "CausalReasoning", "Why does X hold?");
        b.context.evidence_mask.insert("v9".to_string());
        let out = dedup(vec![a, b]);
        assert_eq!(out.len(), 2);
    }

    #[test]
    fn dedup_idempotent_on_fuzz_corpus() {
        let items: Vec<TrainingInstance> = (0..50)
            .map(|i| {
                instance(
                    &format!("i{i}"),
                    &format!("p{}", i % 7),
                    QaKind::Tqa,
                    "CausalReasoning",
                    &format!("Question number {}?", i % 19),
                )
            })
            .collect();
        let once = dedup(items);
        let twice = dedup(once.clone());
        assert_eq!(once, twice);
    }

    #[test]
    fn stats_match_brute_force_counts() {
        let items = vec![
            instance("a", "p1", QaKind::Tqa, "CausalReasoning", "q1?"),
            instance("b", "p1", QaKind::Tqa, "CriticalEvaluation", "q2?"),
            instance("c", "p2", QaKind::Vqa, "EI", "q3?"),
            instance("d", "p2", QaKind::Vqa, "DR", "q4?"),
            instance("e", "p3", QaKind::Vqa, "EI", "q5?"),
            instance("f", "p3", QaKind::Mqa, "EEQ", "q6?"),
            instance("g", "p3", QaKind::Mqa, "CAC", "q7?"),
        ];
        let stats = compute_stats(&items);
        assert_eq!(stats.total, 7);
        assert_eq!(stats.counts["TQA"], 2);
        assert_eq!(stats.counts["VQA"], 3);
        assert_eq!(stats.counts["MQA"], 2);
        assert_eq!(stats.papers, 3);
        assert_eq!(stats.counts_by_type["EI"], 2);
        assert_eq!(stats.counts.values().sum::<u64>(), stats.total);

        let table = render_stats_table(&stats);
        assert!(table.contains("TQA"));
        assert!(table.contains("Answerable solely from textual context"));
        assert!(table.contains("Total"));
    }

    #[test]
    fn stats_empty_corpus_is_all_zero() {
        let stats = compute_stats(&[]);
        assert_eq!(stats.total, 0);
        assert_eq!(stats.papers, 0);
        assert!(stats.counts.is_empty());
    }

    #[test]
    fn export_by_kind_and_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let items = vec![
            instance("a", "p1", QaKind::Tqa, "CausalReasoning", "q1?"),
            instance("b", "p1", QaKind::Vqa, "EI", "q2?"),
            instance("c", "p2", QaKind::Mqa, "EEQ", "q3?"),
        ];
        let manifest = export_jsonl(
            &items,
            ExportLayout::ByKind,
            dir.path(),
            "/data/images",
            json!({"seed": 1}),
        )
        .unwrap();
        assert_eq!(manifest.files.len(), 3);
        assert_eq!(manifest.total, 3);
        for name in ["tqa.jsonl", "vqa.jsonl", "mqa.jsonl", "manifest.json"] {
            assert!(dir.path().join(name).exists(), "{name} missing");
        }

        // Round trip: re-parse each line and compare against the in-memory
        // rendering of the same instance.
        let tqa = std::fs::read_to_string(dir.path().join("tqa.jsonl")).unwrap();
        let parsed: Value = serde_json::from_str(tqa.lines().next().unwrap()).unwrap();
        assert_eq!(parsed, render_record(&items[0], "/data/images"));
        // Image refs are relative to the declared root.
        let vqa = std::fs::read_to_string(dir.path().join("vqa.jsonl")).unwrap();
        assert!(vqa.contains("\"image\":\"v1.png\""));

        // Determinism: re-export yields identical hashes.
        let dir2 = tempfile::tempdir().unwrap();
        let manifest2 = export_jsonl(
            &items,
            ExportLayout::ByKind,
            dir2.path(),
            "/data/images",
            json!({"seed": 1}),
        )
        .unwrap();
        assert_eq!(manifest, manifest2);
    }

    #[test]
    fn split_is_paper_granular_and_seeded() {
        let items: Vec<TrainingInstance> = (0..30)
            .map(|i| {
                instance(
                    &format!("i{i}"),
                    &format!("paper{}", i % 10),
                    QaKind::Tqa,
                    "CausalReasoning",
                    &format!("q{i}?"),
                )
            })
            .collect();
        let mut fractions = BTreeMap::new();
        fractions.insert("train".to_string(), 0.8);
        fractions.insert("dev".to_string(), 0.2);
        let spec = SplitSpec { fractions, seed: 1 };
        let out = split(items.clone(), &spec).unwrap();
        let train_papers: BTreeSet<&str> =
            out["train"].iter().map(|i| i.meta.paper_id.as_str()).collect();
        let dev_papers: BTreeSet<&str> =
            out["dev"].iter().map(|i| i.meta.paper_id.as_str()).collect();
        assert_eq!(train_papers.len(), 8);
        assert_eq!(dev_papers.len(), 2);
        assert!(train_papers.is_disjoint(&dev_papers), "leakage between splits");

        // Stable across runs.
        let again = split(items, &spec).unwrap();
        let dev_again: BTreeSet<&str> =
            again["dev"].iter().map(|i| i.meta.paper_id.as_str()).collect();
        assert_eq!(dev_papers, dev_again);
    }

    #[test]
    fn single_paper_lands_in_largest_fraction() {
        let items = vec![instance("a", "only", QaKind::Tqa, "CausalReasoning", "q?")];
        let mut fractions = BTreeMap::new();
        fractions.insert("train".to_string(), 0.7);
        fractions.insert("dev".to_string(), 0.3);
        let out = split(items, &SplitSpec { fractions, seed: 9 }).unwrap();
        assert_eq!(out["train"].len(), 1);
        assert!(out["dev"].is_empty());
    }

    #[test]
    fn papers_never_straddle_splits_fuzzed() {
        for seed in 0..100u64 {
            let items: Vec<TrainingInstance> = (0..24)
                .map(|i| {
                    instance(
                        &format!("i{i}"),
                        &format!("paper{}", (i + seed as usize) % 6),
                        QaKind::Tqa,
                        "CausalReasoning",
                        &format!("q{i}?"),
                    )
                })
                .collect();
            let mut fractions = BTreeMap::new();
            fractions.insert("train".to_string(), 0.5);
            fractions.insert("dev".to_string(), 0.25);
            fractions.insert("test".to_string(), 0.25);
            let out = split(items, &SplitSpec { fractions, seed }).unwrap();
            let mut seen: BTreeMap<&str, &str> = BTreeMap::new();
            for (name, bucket) in &out {
                for item in bucket {
                    let prev = seen.insert(item.meta.paper_id.as_str(), name);
                    assert!(
                        prev.is_none() || prev == Some(name.as_str()),
                        "paper {} straddles splits (seed {seed})",
                        item.meta.paper_id
                    );
                }
            }
        }
    }

    #[test]
    fn stats_conserved_under_dedup() {
        let items: Vec<TrainingInstance> = (0..40)
            .map(|i| {
                instance(
                    &format!("i{i}"),
                    "p1",
                    QaKind::Tqa,
                    "CausalReasoning",
                    &format!("q{}?", i % 11),
                )
            })
            .collect();
        let before = compute_stats(&items);
        let after = compute_stats(&dedup(items));
        assert!(after.total <= before.total);
    }

    #[test]
    fn invalid_split_specs_rejected() {
        let mut fractions = BTreeMap::new();
        fractions.insert("train".to_string(), 0.5);
        assert!(SplitSpec { fractions, seed: 0 }.validate().is_err());

        let mut fractions = BTreeMap::new();
        fractions.insert("train".to_string(), 1.5);
        fractions.insert("dev".to_string(), -0.5);
        assert!(SplitSpec { fractions, seed: 0 }.validate().is_err());
    }
}
