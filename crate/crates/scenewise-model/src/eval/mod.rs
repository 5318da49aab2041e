//! Evaluation harness: retrieval, probing, scene-graph metrics,
//! localization, relevance maps, and embedding dumps.

pub mod localization;
pub mod metrics;
pub mod predcls;
pub mod probe;
pub mod relevance;
pub mod retrieval;
pub mod templates;

mod items;

pub use localization::{relation_localization, LocalizationDecoderConfig};
pub use metrics::{binary_dice_iou, mask_mae, topk_accuracy, MetricsReport};
pub use predcls::{most_frequent_predicates, predicate_classification, scene_graph_classification};
pub use probe::linear_probe;
pub use relevance::relevance_map;
pub use retrieval::{dump_embeddings, zero_shot_retrieval};
pub use templates::{class_text_embedding, PromptTemplateSet, DEFAULT_TEMPLATES};
