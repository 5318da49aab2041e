//! Prompt templates that turn class labels into natural-language phrases,
//! and template-averaged class text embeddings.

use std::fs;
use std::path::Path;

use ndarray::Array1;

use crate::encoders::{Level, ScenarioModel};
use crate::error::{ModelError, Result};

/// Built-in templates applied when no override file is given.
pub const DEFAULT_TEMPLATES: [&str; 3] = ["a photo of {label}", "a scene showing {label}", "{label}"];

const SLOT: &str = "{label}";

/// A non-empty list of prompt templates, each with exactly one `{label}`
/// slot.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplateSet {
    templates: Vec<String>,
}

impl PromptTemplateSet {
    pub fn new(templates: Vec<String>) -> Result<Self> {
        if templates.is_empty() {
            return Err(ModelError::InvalidConfig(
                "prompt template set must be non-empty".into(),
            ));
        }
        for t in &templates {
            let slots = t.match_indices(SLOT).count();
            if slots != 1 {
                return Err(ModelError::InvalidConfig(format!(
                    "template {t:?} must contain exactly one {SLOT} slot, found {slots}"
                )));
            }
        }
        Ok(PromptTemplateSet { templates })
    }

    /// The built-in default set.
    pub fn default_set() -> Self {
        PromptTemplateSet::new(DEFAULT_TEMPLATES.iter().map(|s| s.to_string()).collect())
            .expect("built-in templates are valid")
    }

    /// Loads one template per line; blank lines and `#` comments are
    /// skipped.
    pub fn from_file(path: &Path) -> Result<Self> {
        let body = fs::read_to_string(path)
            .map_err(|e| ModelError::io(path.display().to_string(), e))?;
        let templates = body
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(str::to_string)
            .collect();
        PromptTemplateSet::new(templates)
    }

    pub fn templates(&self) -> &[String] {
        &self.templates
    }

    /// Substitutes a label into every template.
    pub fn fill(&self, label: &str) -> Vec<String> {
        self.templates.iter().map(|t| t.replace(SLOT, label)).collect()
    }
}

/// Normalizes each row to unit length, averages, and re-normalizes.
pub fn average_normalized(rows: &[Array1<f64>]) -> Array1<f64> {
    assert!(!rows.is_empty(), "cannot average zero embeddings");
    let d = rows[0].len();
    let mut mean = Array1::<f64>::zeros(d);
    for row in rows {
        let norm = row.dot(row).sqrt().max(1e-30);
        mean += &(row / norm);
    }
    mean /= rows.len() as f64;
    let norm = mean.dot(&mean).sqrt().max(1e-30);
    mean / norm
}

/// Class text embedding at a level: every filled template is embedded by
/// the level's text encoder, normalized, averaged, and re-normalized.
pub fn class_text_embedding(
    model: &ScenarioModel,
    label: &str,
    templates: &PromptTemplateSet,
    level: Level,
) -> Array1<f64> {
    let (_, text_tower) = level.towers();
    let rows: Vec<Array1<f64>> = templates
        .fill(label)
        .iter()
        .map(|phrase| model.embed_text(text_tower, phrase))
        .collect();
    average_normalized(&rows)
}
