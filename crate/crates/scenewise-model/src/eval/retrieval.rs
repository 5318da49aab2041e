//! Zero-shot retrieval over fixed class strings and the object-embedding
//! dump for external projection.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use scenewise_data::{load_scene, DatasetManifest, Split};

use crate::encoders::{Level, ScenarioModel};
use crate::error::{ModelError, Result};
use crate::eval::items::{collect_level_items, normalize_rows};
use crate::eval::metrics::{fill_topk, MetricsReport};
use crate::eval::templates::{class_text_embedding, PromptTemplateSet};

/// Task name used in reports and error messages per level.
fn task_name(level: Level) -> &'static str {
    match level {
        Level::Global => "zeroshot_actions",
        Level::Object => "zeroshot_objects",
        Level::Relation => "zeroshot_relations",
    }
}

/// Stacks the template-averaged class embeddings into a C x d matrix.
pub fn class_matrix(
    model: &ScenarioModel,
    class_strings: &[String],
    templates: &PromptTemplateSet,
    level: Level,
) -> Result<Array2<f64>> {
    if class_strings.is_empty() {
        return Err(ModelError::InvalidConfig(
            "class string list must be non-empty".into(),
        ));
    }
    let d = model.config.embed_dim;
    let mut classes = Array2::zeros((class_strings.len(), d));
    for (i, label) in class_strings.iter().enumerate() {
        classes
            .row_mut(i)
            .assign(&class_text_embedding(model, label, templates, level));
    }
    Ok(classes)
}

/// Ranks the split's level items against the class strings by cosine
/// similarity and reports top-k accuracy. Every ground-truth label of the
/// split must appear in `class_strings`.
pub fn zero_shot_retrieval(
    model: &ScenarioModel,
    data_dir: &Path,
    manifest: &DatasetManifest,
    split: Split,
    class_strings: &[String],
    templates: &PromptTemplateSet,
    level: Level,
) -> Result<MetricsReport> {
    let task = task_name(level);
    let classes = class_matrix(model, class_strings, templates, level)?;
    let items = collect_level_items(model, data_dir, manifest, split, level)?;
    let truths: Vec<usize> = items
        .labels
        .iter()
        .map(|label| {
            class_strings
                .iter()
                .position(|c| c == label)
                .ok_or_else(|| ModelError::MissingLabel {
                    task: task.to_string(),
                    label: label.clone(),
                })
        })
        .collect::<Result<_>>()?;
    let scores = normalize_rows(&items.embeddings).dot(&classes.t());
    let mut report = MetricsReport::new(task);
    fill_topk(&mut report, &scores, &truths)?;
    report.n_items = truths.len();
    report.config = serde_json::json!({
        "split": split.as_str(),
        "classes": class_strings.len(),
        "templates": templates.templates().len(),
    });
    report.validate()?;
    Ok(report)
}

/// Writes object-level image and text embeddings with labels as a binary
/// matrix plus a label list: `{stem}.f64` holds all image rows then all
/// text rows as little-endian doubles, `{stem}.labels.tsv` one
/// `{side}\t{label}` line per row in the same order.
pub fn dump_embeddings(
    model: &ScenarioModel,
    data_dir: &Path,
    manifest: &DatasetManifest,
    split: Split,
    out_stem: &Path,
) -> Result<(PathBuf, PathBuf)> {
    let mut image_rows: Vec<(Vec<f64>, String)> = Vec::new();
    let mut text_rows: Vec<(Vec<f64>, String)> = Vec::new();
    for &id in manifest.split_ids(split) {
        let record = load_scene(data_dir, id)?;
        for obj in &record.objects {
            let crop = model.prepare_crop(&record.image, &obj.bbox);
            let (emb, _) = model.embed_image(crate::encoders::Tower::VisualObject, &crop)?;
            image_rows.push((emb.to_vec(), obj.name.clone()));
            let text = model.embed_text(crate::encoders::Tower::TextObject, &obj.name);
            text_rows.push((text.to_vec(), obj.name.clone()));
        }
    }
    if let Some(parent) = out_stem.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)
                .map_err(|e| ModelError::io(parent.display().to_string(), e))?;
        }
    }
    let matrix_path = out_stem.with_extension("f64");
    let labels_path = out_stem.with_extension("labels.tsv");
    let mut matrix = Vec::with_capacity((image_rows.len() + text_rows.len()) * model.config.embed_dim * 8);
    let mut labels = String::new();
    for (side, rows) in [("image", &image_rows), ("text", &text_rows)] {
        for (row, label) in rows.iter() {
            for v in row {
                matrix.extend_from_slice(&v.to_le_bytes());
            }
            labels.push_str(side);
            labels.push('\t');
            labels.push_str(label);
            labels.push('\n');
        }
    }
    let mut f = fs::File::create(&matrix_path)
        .map_err(|e| ModelError::io(matrix_path.display().to_string(), e))?;
    f.write_all(&matrix)
        .map_err(|e| ModelError::io(matrix_path.display().to_string(), e))?;
    fs::write(&labels_path, labels)
        .map_err(|e| ModelError::io(labels_path.display().to_string(), e))?;
    Ok((matrix_path, labels_path))
}
