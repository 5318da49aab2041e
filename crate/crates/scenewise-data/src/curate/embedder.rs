//! Pluggable text embeddings for label clustering and antonym lookup.
//!
//! The default embedder hashes character trigrams into a fixed-width vector,
//! which is deterministic, dependency-free, and good enough to separate the
//! short labels that curation operates on.

use crate::error::{DataError, Result};

/// A named text-embedding function producing unit-norm vectors.
pub trait TextEmbedder {
    /// Embeds a label into a fixed-dimension unit vector.
    fn embed(&self, label: &str) -> Result<Vec<f64>>;
    /// Stable identifier recorded in configs and manifests.
    fn name(&self) -> &'static str;
}

/// Character-trigram hashing embedder with signed buckets.
#[derive(Debug, Clone)]
pub struct NgramEmbedder {
    dim: usize,
}

impl NgramEmbedder {
    pub fn new(dim: usize) -> Self {
        Self { dim }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
}

impl Default for NgramEmbedder {
    fn default() -> Self {
        Self::new(64)
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

impl TextEmbedder for NgramEmbedder {
    fn embed(&self, label: &str) -> Result<Vec<f64>> {
        if label.is_empty() {
            return Err(DataError::Embedding {
                label: label.to_string(),
                reason: "empty label".into(),
            });
        }
        let padded = format!("\u{2}{}\u{3}", label.to_lowercase());
        let bytes = padded.as_bytes();
        let mut v = vec![0.0f64; self.dim];
        for window in bytes.windows(3) {
            let h = fnv1a(window);
            let idx = (h % self.dim as u64) as usize;
            let sign = if (h >> 32) & 1 == 0 { 1.0 } else { -1.0 };
            v[idx] += sign;
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(DataError::Embedding {
                label: label.to_string(),
                reason: "degenerate all-zero embedding".into(),
            });
        }
        for x in &mut v {
            *x /= norm;
        }
        Ok(v)
    }

    fn name(&self) -> &'static str {
        "ngram-64"
    }
}

/// Resolves an embedder by its configured name.
pub fn embedder_by_name(name: &str) -> Result<Box<dyn TextEmbedder>> {
    match name {
        "ngram-64" => Ok(Box::new(NgramEmbedder::new(64))),
        other => Err(DataError::InvalidParameter(format!(
            "unknown embedder {other:?}, available: ngram-64"
        ))),
    }
}

/// Cosine distance between two vectors, clamped away from negative round-off.
pub fn cosine_distance(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 1.0;
    }
    (1.0 - dot / (na * nb)).max(0.0)
}

/// Cosine similarity between two vectors.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    1.0 - cosine_distance(a, b)
}
