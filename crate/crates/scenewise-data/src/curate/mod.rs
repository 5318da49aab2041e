//! Vocabulary curation: label normalization, plural folding, density-based
//! grouping, relation canonicalization, and negative triplet synthesis.

pub mod cluster;
pub mod embedder;
pub mod negatives;

pub use cluster::{cluster_objects, mutual_reachability, ClusterConfig, VocabularyState};
pub use embedder::{embedder_by_name, NgramEmbedder, TextEmbedder};
pub use negatives::{builtin_antonyms, generate_negative_triplets, AntonymDictionary};

use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use crate::error::{DataError, Result};
use crate::types::Triplet;

/// Part-of-speech interface used by label normalization. Only adjectives
/// matter for curation, so the interface stays minimal.
pub trait PosTagger {
    fn is_adjective(&self, token: &str) -> bool;
}

/// Tagger that marks nothing; normalization then only strips colors.
#[derive(Debug, Clone, Default)]
pub struct NoopTagger;

impl PosTagger for NoopTagger {
    fn is_adjective(&self, _token: &str) -> bool {
        false
    }
}

/// Tagger backed by an explicit adjective list, for tests and fixtures.
#[derive(Debug, Clone, Default)]
pub struct ListTagger {
    adjectives: BTreeSet<String>,
}

impl ListTagger {
    pub fn new<I: IntoIterator<Item = S>, S: Into<String>>(words: I) -> Self {
        Self { adjectives: words.into_iter().map(Into::into).collect() }
    }
}

impl PosTagger for ListTagger {
    fn is_adjective(&self, token: &str) -> bool {
        self.adjectives.contains(token)
    }
}

/// Built-in color terms stripped during object-label normalization.
pub fn builtin_colors() -> BTreeSet<String> {
    [
        "red", "green", "blue", "yellow", "magenta", "cyan", "black", "white", "orange",
        "purple", "brown", "pink", "gray", "grey",
    ]
    .into_iter()
    .map(str::to_string)
    .collect()
}

/// Built-in stopwords removed from relation predicates.
pub fn builtin_stopwords() -> BTreeSet<String> {
    [
        "a", "an", "the", "on", "in", "at", "of", "to", "with", "by", "from", "for", "onto",
        "into", "upon",
    ]
    .into_iter()
    .map(str::to_string)
    .collect()
}

/// Strips color terms and adjective-tagged tokens from an object label.
/// Falls back to the original label when everything would be removed.
pub fn normalize_object_label(
    label: &str,
    color_list: &BTreeSet<String>,
    tagger: &dyn PosTagger,
) -> String {
    let kept: Vec<&str> = label
        .split_whitespace()
        .filter(|t| !color_list.contains(*t) && !tagger.is_adjective(t))
        .collect();
    if kept.is_empty() {
        label.to_string()
    } else {
        kept.join(" ")
    }
}

/// Drops plural labels whose singular is also present, remapping their
/// occurrences; the output keeps first-occurrence order without duplicates.
pub fn fold_plurals(labels: &[String]) -> Vec<String> {
    let present: BTreeSet<&str> = labels.iter().map(String::as_str).collect();
    let singular_of = |label: &str| -> Option<String> {
        if let Some(stem) = label.strip_suffix("es") {
            if present.contains(stem) {
                return Some(stem.to_string());
            }
        }
        if let Some(stem) = label.strip_suffix('s') {
            if present.contains(stem) {
                return Some(stem.to_string());
            }
        }
        None
    };
    let mut out: Vec<String> = Vec::new();
    for label in labels {
        let mapped = singular_of(label).unwrap_or_else(|| label.clone());
        if !out.contains(&mapped) {
            out.push(mapped);
        }
    }
    out
}

/// Same folding, but returns the per-label mapping instead of the survivors.
pub fn plural_map(labels: &[String]) -> BTreeMap<String, String> {
    let present: BTreeSet<&str> = labels.iter().map(String::as_str).collect();
    let mut out = BTreeMap::new();
    for label in labels {
        let mut mapped = label.clone();
        if let Some(stem) = label.strip_suffix("es") {
            if present.contains(stem) {
                mapped = stem.to_string();
            }
        }
        if mapped == *label {
            if let Some(stem) = label.strip_suffix('s') {
                if present.contains(stem) {
                    mapped = stem.to_string();
                }
            }
        }
        out.insert(label.clone(), mapped);
    }
    out
}

/// Maps a triplet's objects through group assignments and removes stopwords
/// from the predicate; the predicate is never emptied.
pub fn canonicalize_relation(
    triplet: &Triplet,
    groups: &BTreeMap<String, String>,
    stopwords: &BTreeSet<String>,
) -> Triplet {
    let map_obj = |s: &String| groups.get(s).cloned().unwrap_or_else(|| s.clone());
    let kept: Vec<&str> = triplet
        .1
        .split_whitespace()
        .filter(|t| !stopwords.contains(*t))
        .collect();
    let predicate = if kept.is_empty() { triplet.1.clone() } else { kept.join(" ") };
    (map_obj(&triplet.0), predicate, map_obj(&triplet.2))
}

/// Removes triplets whose canonical form already appeared; the first
/// occurrence survives in input order.
pub fn dedupe_relations(
    triplets: &[Triplet],
    groups: &BTreeMap<String, String>,
    stopwords: &BTreeSet<String>,
) -> Vec<Triplet> {
    let mut seen: Vec<Triplet> = Vec::new();
    let mut out = Vec::new();
    for t in triplets {
        let canonical = canonicalize_relation(t, groups, stopwords);
        if !seen.contains(&canonical) {
            seen.push(canonical);
            out.push(t.clone());
        }
    }
    out
}

/// Reads a one-term-per-line list file; blank lines and # comments skipped.
pub fn load_term_list(path: &Path) -> Result<BTreeSet<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| DataError::io(path, e))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(str::to_string)
        .collect())
}

/// Reads a tab-separated two-column antonym file.
pub fn load_antonyms(path: &Path) -> Result<AntonymDictionary> {
    let text = std::fs::read_to_string(path).map_err(|e| DataError::io(path, e))?;
    let mut entries = BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('\t').ok_or_else(|| {
            DataError::InvalidParameter(format!(
                "antonym file {path:?} line {}: expected two tab-separated columns",
                lineno + 1
            ))
        })?;
        entries.insert(key.trim().to_string(), value.trim().to_string());
    }
    AntonymDictionary::new(entries)
}

/// Serialized curation output consumed by downstream tools.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CuratedVocabulary {
    pub version: u32,
    /// Raw label -> canonical label (group name or identity).
    pub mapping: BTreeMap<String, String>,
    /// Labels the clustering left ungrouped.
    pub noise: Vec<String>,
}

/// Full curation pipeline: normalize, fold plurals, cluster, name groups.
///
/// `raw_labels` keep their identity as mapping keys; clustering operates on
/// the normalized, plural-folded forms.
pub fn curate_labels(
    raw_labels: &[String],
    color_list: &BTreeSet<String>,
    tagger: &dyn PosTagger,
    config: &ClusterConfig,
) -> Result<CuratedVocabulary> {
    let embedder = embedder_by_name(&config.embedder)?;
    let normalized: Vec<String> = raw_labels
        .iter()
        .map(|l| normalize_object_label(l, color_list, tagger))
        .collect();
    let folds = plural_map(&normalized);
    let folded: Vec<String> = normalized
        .iter()
        .map(|l| folds.get(l).cloned().unwrap_or_else(|| l.clone()))
        .collect();
    let state = cluster_objects(&folded, config, embedder.as_ref())?;
    let canonical = state.canonical_map();

    let mut mapping = BTreeMap::new();
    let mut noise = Vec::new();
    for (raw, folded_label) in raw_labels.iter().zip(&folded) {
        let target = canonical.get(folded_label).cloned().unwrap_or_else(|| folded_label.clone());
        if state.noise_labels.contains(folded_label) && !noise.contains(raw) {
            noise.push(raw.clone());
        }
        mapping.insert(raw.clone(), target);
    }
    Ok(CuratedVocabulary { version: 1, mapping, noise })
}

/// Writes a curated vocabulary as pretty JSON.
pub fn write_vocabulary(vocab: &CuratedVocabulary, path: &Path) -> Result<()> {
    let json = serde_json::to_string_pretty(vocab)
        .map_err(|e| DataError::Serde { path: path.into(), source: e })?;
    std::fs::write(path, json + "\n").map_err(|e| DataError::io(path, e))
}

/// Loads a curated vocabulary file.
pub fn load_vocabulary(path: &Path) -> Result<CuratedVocabulary> {
    let text = std::fs::read_to_string(path).map_err(|e| DataError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| DataError::Serde { path: path.into(), source: e })
}
