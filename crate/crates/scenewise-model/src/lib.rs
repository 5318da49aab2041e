//! Disentangled scene-text encoders with multi-level contrastive alignment
//! and intra-modal EMA distillation, plus their training loop and
//! evaluation harness.

pub mod checkpoint;
pub mod ema;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod interp;
pub mod nn;
pub mod objectives;
pub mod optim;
pub mod tape;
pub mod train;

pub use encoders::{
    EmbeddingSet, EncoderConfig, Level, ScenarioModel, SceneNodes, TokenVocab, Tower,
};
pub use error::{ModelError, Result};
pub use eval::MetricsReport;
pub use train::{train, TrainConfig, TrainOutcome};
