//! Prompt templates with named placeholders.
//!
//! Templates ship embedded in the binary and can be overridden per run from a
//! directory of `<name>.txt` files. Because the rendered template text is part
//! of every request, template edits change the request digest automatically,
//! which keeps the response cache honest across template versions.

use std::collections::BTreeMap;
use std::path::Path;

use sha2::{Digest, Sha256};

/// Template names bundled with the crate.
pub const TEMPLATE_NAMES: &[&str] = &[
    "study_gate",
    "claim_extraction",
    "visual_grounding",
    "tqa_generation",
    "mqa_generation",
    "vqa_generation",
    "judge",
    "failure_tag",
];

#[derive(Debug, thiserror::Error)]
pub enum PromptError {
    #[error("failed to read template {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone)]
pub struct PromptLibrary {
    templates: BTreeMap<String, String>,
}

impl PromptLibrary {
    /// The embedded default templates.
    pub fn builtin() -> Self {
        let mut templates = BTreeMap::new();
        templates.insert(
            "study_gate".to_string(),
            include_str!("../templates/study_gate.txt").to_string(),
        );
        templates.insert(
            "claim_extraction".to_string(),
            include_str!("../templates/claim_extraction.txt").to_string(),
        );
        templates.insert(
            "visual_grounding".to_string(),
            include_str!("../templates/visual_grounding.txt").to_string(),
        );
        templates.insert(
            "tqa_generation".to_string(),
            include_str!("../templates/tqa_generation.txt").to_string(),
        );
        templates.insert(
            "mqa_generation".to_string(),
            include_str!("../templates/mqa_generation.txt").to_string(),
        );
        templates.insert(
            "vqa_generation".to_string(),
            include_str!("../templates/vqa_generation.txt").to_string(),
        );
        templates.insert(
            "judge".to_string(),
            include_str!("../templates/judge.txt").to_string(),
        );
        templates.insert(
            "failure_tag".to_string(),
            include_str!("../templates/failure_tag.txt").to_string(),
        );
        Self { templates }
    }

    /// Builtin templates overridden by any `<name>.txt` files found in `dir`.
    pub fn from_dir(dir: &Path) -> Result<Self, PromptError> {
        let mut lib = Self::builtin();
        for name in TEMPLATE_NAMES {
            let path = dir.join(format!("{name}.txt"));
            if path.exists() {
                let text = std::fs::read_to_string(&path).map_err(|source| PromptError::Io {
                    path: path.display().to_string(),
                    source,
                })?;
                lib.templates.insert((*name).to_string(), text);
            }
        }
        Ok(lib)
    }

    pub fn get(&self, name: &str) -> Option<&str> {
        self.templates.get(name).map(|s| s.as_str())
    }

    /// Render a template, substituting each `{key}` placeholder.
    ///
    /// Panics if the template is missing or does not contain a requested
    /// placeholder; both are programming errors, not data errors.
    pub fn render(&self, name: &str, pairs: &[(&str, &str)]) -> String {
        let mut text = self
            .templates
            .get(name)
            .unwrap_or_else(|| panic!("unknown prompt template '{name}'"))
            .clone();
        for (key, value) in pairs {
            let token = format!("{{{key}}}");
            assert!(
                text.contains(&token),
                "template '{name}' has no placeholder {token}"
            );
            text = text.replace(&token, value);
        }
        text
    }

    /// Content hash of one template, for manifests and logs.
    pub fn template_hash(&self, name: &str) -> Option<String> {
        self.templates.get(name).map(|t| {
            let mut hasher = Sha256::new();
            hasher.update(t.as_bytes());
            hex::encode(hasher.finalize())
        })
    }
}

impl Default for PromptLibrary {
    fn default() -> Self {
        Self::builtin()
    }
}

/// Extract the body of a `Label:\n<<<\n…\n>>>` block from a rendered prompt.
/// The deterministic mock backend uses this to read prompt inputs back out.
pub fn extract_block<'a>(prompt: &'a str, label: &str) -> Option<&'a str> {
    let marker = format!("{label}:\n<<<\n");
    let start = prompt.find(&marker)? + marker.len();
    let end = prompt[start..].find("\n>>>")? + start;
    Some(&prompt[start..end])
}
