//! Prompt templates with `<Placeholder>` slots.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::data::FeatureModuleMeta;

const CATEGORIZE_TEMPLATE: &str = include_str!("../assets/templates/categorize.txt");
const DISCOVER_TEMPLATE: &str = include_str!("../assets/templates/discover.txt");

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("{0} has an empty description")]
    EmptyDescription(String),
    #[error("cannot read template {path}: {message}")]
    Io { path: String, message: String },
}

/// The target indicator as presented to the LLM.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndicatorMeta {
    pub name: String,
    pub description: String,
}

impl IndicatorMeta {
    pub fn new(name: impl Into<String>, description: impl Into<String>) -> Self {
        IndicatorMeta {
            name: name.into(),
            description: description.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplates {
    pub categorize: String,
    pub discover: String,
}

impl Default for PromptTemplates {
    fn default() -> Self {
        PromptTemplates {
            categorize: CATEGORIZE_TEMPLATE.to_owned(),
            discover: DISCOVER_TEMPLATE.to_owned(),
        }
    }
}

impl PromptTemplates {
    /// Loads `categorize.txt` and `discover.txt` from `dir`; a missing file
    /// keeps the bundled template.
    pub fn load_dir(dir: &Path) -> Result<Self, PromptError> {
        let mut t = Self::default();
        for (file, slot) in [("categorize.txt", &mut t.categorize), ("discover.txt", &mut t.discover)] {
            let path = dir.join(file);
            if path.exists() {
                *slot = std::fs::read_to_string(&path).map_err(|e| PromptError::Io {
                    path: path.display().to_string(),
                    message: e.to_string(),
                })?;
            }
        }
        Ok(t)
    }

    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.categorize.as_bytes());
        h.update([0u8]);
        h.update(self.discover.as_bytes());
        hex::encode(h.finalize())
    }
}

pub(crate) fn fill(template: &str, slots: &[(&str, &str)]) -> String {
    let mut out = template.to_owned();
    for (key, value) in slots {
        out = out.replace(key, value);
    }
    out
}

pub(crate) fn check_description(what: &str, description: &str) -> Result<(), PromptError> {
    if description.trim().is_empty() {
        Err(PromptError::EmptyDescription(what.to_owned()))
    } else {
        Ok(())
    }
}

/// `"name": Description (numerical variable within range [min, max])`
pub(crate) fn module_line(m: &FeatureModuleMeta) -> String {
    let mut desc = m.description.trim().to_owned();
    if let Some(first) = desc.get(0..1) {
        desc.replace_range(0..1, &first.to_uppercase());
    }
    match m.value_range {
        Some((lo, hi)) => format!(
            "• \"{}\": {} (numerical variable within range [{lo}, {hi}])",
            m.name, desc
        ),
        None => format!("• \"{}\": {} (numerical variable)", m.name, desc),
    }
}
