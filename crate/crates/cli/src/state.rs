//! Resumable job state: one JSON file per run, replaced atomically after
//! every stage transition. Stage order is monotone per paper; artifacts for a
//! completed stage are files on disk named by stage.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Ingested,
    Gated,
    Claims,
    Grounded,
    Qa,
    Regrounded,
    Exported,
}

impl Stage {
    pub fn as_str(&self) -> &'static str {
        match self {
            Stage::Ingested => "ingested",
            Stage::Gated => "gated",
            Stage::Claims => "claims",
            Stage::Grounded => "grounded",
            Stage::Qa => "qa",
            Stage::Regrounded => "regrounded",
            Stage::Exported => "exported",
        }
    }
}

impl std::str::FromStr for Stage {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_lowercase().as_str() {
            "ingested" | "ingest" => Ok(Stage::Ingested),
            "gated" | "gate" => Ok(Stage::Gated),
            "claims" => Ok(Stage::Claims),
            "grounded" | "grounding" => Ok(Stage::Grounded),
            "qa" => Ok(Stage::Qa),
            "regrounded" | "reground" => Ok(Stage::Regrounded),
            "exported" | "export" => Ok(Stage::Exported),
            other => Err(format!("unknown stage '{other}'")),
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct PaperState {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stage: Option<Stage>,
    #[serde(default)]
    pub artifacts: BTreeMap<String, PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    /// Set when the study gate filtered this paper out; it stays at `gated`
    /// and never advances, without counting as an error.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub gated_out: bool,
}

impl PaperState {
    pub fn completed(&self, stage: Stage) -> bool {
        self.stage.is_some_and(|s| s >= stage)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct JobState {
    pub run_id: String,
    pub config_hash: String,
    pub per_paper: BTreeMap<String, PaperState>,
}

impl JobState {
    pub fn new(run_id: &str, config_hash: &str) -> Self {
        Self {
            run_id: run_id.to_string(),
            config_hash: config_hash.to_string(),
            per_paper: BTreeMap::new(),
        }
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let bytes = std::fs::read(path)
            .map_err(|e| anyhow::anyhow!("cannot read state {}: {e}", path.display()))?;
        Ok(serde_json::from_slice(&bytes)?)
    }

    pub fn save(&self, path: &Path) -> anyhow::Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let tmp = path.with_extension("json.tmp");
        std::fs::write(&tmp, serde_json::to_vec_pretty(self)?)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    /// Record a completed stage for a paper. Transitions are monotone: a
    /// stage can never move backwards.
    pub fn advance(&mut self, paper_id: &str, stage: Stage, artifact: Option<PathBuf>) {
        let entry = self.per_paper.entry(paper_id.to_string()).or_default();
        debug_assert!(
            entry.stage.is_none_or(|s| stage >= s),
            "stage regression for {paper_id}: {:?} -> {:?}",
            entry.stage,
            stage
        );
        if entry.stage.is_none_or(|s| stage > s) {
            entry.stage = Some(stage);
        }
        if let Some(path) = artifact {
            entry.artifacts.insert(stage.as_str().to_string(), path);
        }
        entry.error = None;
    }

    pub fn record_error(&mut self, paper_id: &str, error: String) {
        let entry = self.per_paper.entry(paper_id.to_string()).or_default();
        entry.error = Some(error);
    }

    pub fn error_count(&self) -> usize {
        self.per_paper.values().filter(|p| p.error.is_some()).count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stages_are_ordered() {
        assert!(Stage::Ingested < Stage::Gated);
        assert!(Stage::Gated < Stage::Claims);
        assert!(Stage::Claims < Stage::Grounded);
        assert!(Stage::Grounded < Stage::Qa);
        assert!(Stage::Qa < Stage::Regrounded);
        assert!(Stage::Regrounded < Stage::Exported);
    }

    #[test]
    fn advance_and_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("state.json");
        let mut state = JobState::new("r1", "hash");
        state.advance("p1", Stage::Ingested, Some(path.with_file_name("a.json")));
        state.advance("p1", Stage::Gated, None);
        state.save(&path).unwrap();
        let loaded = JobState::load(&path).unwrap();
        assert_eq!(loaded.per_paper["p1"].stage, Some(Stage::Gated));
        assert!(loaded.per_paper["p1"].completed(Stage::Ingested));
        assert!(!loaded.per_paper["p1"].completed(Stage::Claims));
    }
}
