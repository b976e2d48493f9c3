//! Run configuration: TOML file plus CLI overrides, validated before any
//! stage runs and hashed into the job state so resumed runs cannot silently
//! mix configurations.

use std::collections::BTreeMap;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use sciqa_core::reground::PackingBudget;

/// The only place a credential enters the process.
pub const API_KEY_ENV: &str = "OPENAI_API_KEY";

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct Endpoints {
    pub base_url: String,
    pub generator_model: String,
    pub judge_model: String,
    pub gate_model: String,
}

impl Default for Endpoints {
    fn default() -> Self {
        Self {
            base_url: "http://localhost:8000".to_string(),
            generator_model: "generator".to_string(),
            judge_model: String::new(),
            gate_model: "gate".to_string(),
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct Budgets {
    pub max_requests: Option<u64>,
    pub max_output_tokens: Option<u64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PackingParams {
    pub max_images: usize,
    pub max_tokens: usize,
    pub chars_per_token: usize,
    pub image_token_cost: usize,
}

impl Default for PackingParams {
    fn default() -> Self {
        let d = PackingBudget::default();
        Self {
            max_images: d.max_images,
            max_tokens: d.max_tokens,
            chars_per_token: d.chars_per_token,
            image_token_cost: d.image_token_cost,
        }
    }
}

impl PackingParams {
    pub fn budget(&self) -> PackingBudget {
        PackingBudget {
            max_images: self.max_images,
            max_tokens: self.max_tokens,
            chars_per_token: self.chars_per_token,
            image_token_cost: self.image_token_cost,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub endpoints: Endpoints,
    pub budgets: Budgets,
    pub packing: PackingParams,
    pub seed: u64,
    pub samples_per_claim: u32,
    /// Paper-level parallelism.
    pub workers: usize,
    /// Gateway in-flight bound.
    pub concurrency: usize,
    pub retries: u32,
    pub temperature_generation: f64,
    pub templates_dir: Option<PathBuf>,
    pub image_root: String,
    /// Split fractions by name; empty means one `train` split.
    pub split: BTreeMap<String, f64>,
    pub runs_dir: PathBuf,
    pub out_dir: PathBuf,
    pub cache_dir: Option<PathBuf>,
    pub mock: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            endpoints: Endpoints::default(),
            budgets: Budgets::default(),
            packing: PackingParams::default(),
            seed: 0,
            samples_per_claim: 1,
            workers: 4,
            concurrency: 4,
            retries: 3,
            temperature_generation: 0.7,
            templates_dir: None,
            image_root: String::new(),
            split: BTreeMap::new(),
            runs_dir: PathBuf::from("runs"),
            out_dir: PathBuf::from("out"),
            cache_dir: None,
            mock: false,
        }
    }
}

impl RunConfig {
    pub fn load(path: &std::path::Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| anyhow::anyhow!("cannot read config {}: {e}", path.display()))?;
        let config: RunConfig = toml::from_str(&text)
            .map_err(|e| anyhow::anyhow!("invalid config {}: {e}", path.display()))?;
        Ok(config)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        if self.endpoints.generator_model.trim().is_empty() {
            anyhow::bail!("endpoints.generator_model must be set");
        }
        if self.endpoints.gate_model.trim().is_empty() {
            anyhow::bail!("endpoints.gate_model must be set");
        }
        // The judge model is validated lazily, by the commands that use it.
        if self.workers == 0 || self.concurrency == 0 {
            anyhow::bail!("workers and concurrency must be at least 1");
        }
        if self.samples_per_claim == 0 {
            anyhow::bail!("samples_per_claim must be at least 1");
        }
        if !self.split.is_empty() {
            let sum: f64 = self.split.values().sum();
            if (sum - 1.0).abs() > 1e-9 {
                anyhow::bail!("split fractions sum to {sum}, expected 1.0");
            }
        }
        if self.temperature_generation < 0.0 {
            anyhow::bail!("temperature_generation must be >= 0");
        }
        Ok(())
    }

    pub fn require_judge_model(&self) -> anyhow::Result<&str> {
        let model = self.endpoints.judge_model.trim();
        if model.is_empty() {
            anyhow::bail!("endpoints.judge_model must be set for judging");
        }
        Ok(model)
    }

    /// Digest over the semantic knobs only. Directory locations and worker
    /// counts can change between resumed invocations; anything that alters
    /// the produced data cannot.
    pub fn semantic_hash(&self) -> String {
        let semantic = serde_json::json!({
            "endpoints": {
                "base_url": self.endpoints.base_url,
                "generator_model": self.endpoints.generator_model,
                "judge_model": self.endpoints.judge_model,
                "gate_model": self.endpoints.gate_model,
            },
            "budgets": self.budgets,
            "packing": self.packing,
            "seed": self.seed,
            "samples_per_claim": self.samples_per_claim,
            "temperature_generation": self.temperature_generation,
            "split": self.split,
            "mock": self.mock,
        });
        let bytes = serde_json::to_vec(&semantic).expect("config serializes");
        hex::encode(Sha256::digest(bytes))
    }

    /// The config surface echoed into export manifests; free of run-local
    /// paths so re-runs from different directories stay byte-identical.
    pub fn manifest_echo(&self) -> serde_json::Value {
        serde_json::json!({
            "generator_model": self.endpoints.generator_model,
            "gate_model": self.endpoints.gate_model,
            "packing": self.packing,
            "seed": self.seed,
            "samples_per_claim": self.samples_per_claim,
            "temperature_generation": self.temperature_generation,
            "split": self.split,
            "mock": self.mock,
            "config_hash": self.semantic_hash(),
        })
    }
}
