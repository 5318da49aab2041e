//! Procedural scenario dataset: scene synthesis with relation-focused
//! regions, deterministic rendering to disk, and vocabulary curation.
//!
//! Scenes are desk-scale stand-ins for captioned real imagery: parametric
//! glyphs laid out by motifs, geometric relation predicates verifiable from
//! pixels, and an action label derived from scene composition. Every artifact
//! is reproducible byte-for-byte from (config, seed).

pub mod curate;
pub mod dataset;
pub mod error;
pub mod kernels;
pub mod synth;
pub mod types;

pub use curate::negatives::{builtin_antonyms, generate_negative_triplets, AntonymDictionary};
pub use dataset::{
    load_manifest, load_scene, load_split, render_dataset, union_bbox, verify_dataset,
};
pub use error::{DataError, Result};
pub use synth::generate_scene;
pub use types::{
    triplet_caption, BoundingBox, DatasetManifest, LabelVocab, RelationAnnotation, SceneConfig,
    SceneObject, SceneRecord, Split, Triplet,
};
