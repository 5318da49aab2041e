//! Error types for model construction, training, and evaluation.

use std::path::PathBuf;

/// Errors produced by encoders, objectives, training, and evaluation.
#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    /// A parameter violated a documented precondition.
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// An input tensor or record had an incompatible shape or content.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A configuration failed validation.
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    /// Training produced a non-finite loss and aborted.
    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: u64, detail: String },

    /// Evaluation was asked to score a label missing from the class list.
    #[error("label {label:?} missing from the class list for task {task}")]
    MissingLabel { task: String, label: String },

    /// Filesystem failure with the offending path attached.
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Checkpoint file malformed or incompatible.
    #[error("checkpoint error at {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    /// JSON (de)serialization failure.
    #[error("serialization error at {path}: {source}")]
    Serde {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    /// Errors bubbled up from the dataset layer.
    #[error(transparent)]
    Data(#[from] scenewise_data::DataError),
}

impl ModelError {
    /// Wraps an io::Error with the path it concerns.
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io { path: path.into(), source }
    }
}

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, ModelError>;
