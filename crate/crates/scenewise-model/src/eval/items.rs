//! Streaming collection of per-level evaluation items from a rendered
//! dataset directory.

use std::path::Path;

use ndarray::{Array1, Array2};
use scenewise_data::{load_scene, DatasetManifest, Split};

use crate::encoders::{Level, ScenarioModel};
use crate::error::Result;

/// Image-side embeddings with their ground-truth labels for one level.
pub struct LevelItems {
    /// One row per item, unnormalized head outputs.
    pub embeddings: Array2<f64>,
    pub labels: Vec<String>,
}

/// Embeds every item of a split at a level: full images for the global
/// level, object crops for the object level, focused regions for the
/// relation level. Scenes stream from disk one at a time.
pub fn collect_level_items(
    model: &ScenarioModel,
    data_dir: &Path,
    manifest: &DatasetManifest,
    split: Split,
    level: Level,
) -> Result<LevelItems> {
    let (visual_tower, _) = level.towers();
    let mut rows: Vec<Array1<f64>> = Vec::new();
    let mut labels = Vec::new();
    for &id in manifest.split_ids(split) {
        let record = load_scene(data_dir, id)?;
        match level {
            Level::Global => {
                let (emb, _) = model.embed_image(visual_tower, &record.image)?;
                rows.push(emb);
                labels.push(record.action.clone());
            }
            Level::Object => {
                for obj in &record.objects {
                    let crop = model.prepare_crop(&record.image, &obj.bbox);
                    let (emb, _) = model.embed_image(visual_tower, &crop)?;
                    rows.push(emb);
                    labels.push(obj.name.clone());
                }
            }
            Level::Relation => {
                for rel in &record.relations {
                    let (emb, _) = model.embed_image(visual_tower, &rel.focused_region)?;
                    rows.push(emb);
                    labels.push(rel.triplet.1.clone());
                }
            }
        }
    }
    let d = model.config.embed_dim;
    let mut embeddings = Array2::zeros((rows.len(), d));
    for (i, row) in rows.iter().enumerate() {
        embeddings.row_mut(i).assign(row);
    }
    Ok(LevelItems { embeddings, labels })
}

/// The manifest's label list for a level, in canonical order.
pub fn level_classes(manifest: &DatasetManifest, level: Level) -> Vec<String> {
    match level {
        Level::Global => manifest.vocab.actions.clone(),
        Level::Object => manifest.vocab.objects.clone(),
        Level::Relation => manifest.vocab.relations.clone(),
    }
}

/// Normalizes every row to unit length; zero rows stay zero up to the
/// guard.
pub fn normalize_rows(m: &Array2<f64>) -> Array2<f64> {
    let mut out = m.clone();
    for mut row in out.rows_mut() {
        let norm = row.dot(&row).sqrt().max(1e-30);
        row /= norm;
    }
    out
}
