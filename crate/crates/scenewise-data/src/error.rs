//! Error types for dataset synthesis and curation.

use std::path::PathBuf;

/// Errors produced by scene synthesis, rendering, and vocabulary curation.
#[derive(Debug, thiserror::Error)]
pub enum DataError {
    /// A parameter violated a documented precondition.
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// A scene configuration failed validation.
    #[error("invalid scene config: {0}")]
    InvalidConfig(String),

    /// Scene generation could not satisfy the configured constraints.
    #[error("scene generation failed for seed {seed}: {reason}")]
    Generation { seed: u64, reason: String },

    /// Negative-triplet synthesis ran out of valid candidates.
    #[error("negative candidates exhausted for scene {scene}: {reason}")]
    NegativeExhausted { scene: String, reason: String },

    /// Label embedding failed for a specific label.
    #[error("embedding failed for label {label:?}: {reason}")]
    Embedding { label: String, reason: String },

    /// Filesystem failure with the offending path attached.
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// An on-disk artifact did not match its manifest entry.
    #[error("corrupt dataset artifact at {path}: {reason}")]
    Corrupt { path: PathBuf, reason: String },

    /// JSON (de)serialization failure.
    #[error("serialization error at {path}: {source}")]
    Serde {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    /// Image decoding or encoding failure.
    #[error("image error at {path}: {reason}")]
    Image { path: PathBuf, reason: String },
}

impl DataError {
    /// Wraps an io::Error with the path it concerns.
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io { path: path.into(), source }
    }
}

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, DataError>;
