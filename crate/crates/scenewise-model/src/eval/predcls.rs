//! Predicate classification (PredCls) and scene-graph classification
//! (SGCls) over ground-truth boxes.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array1, Array2};
use scenewise_data::{load_scene, union_bbox, DatasetManifest, SceneRecord, Split};

use crate::encoders::{ScenarioModel, Tower};
use crate::error::{ModelError, Result};
use crate::eval::metrics::{fill_topk, MetricsReport};

/// Produces the (object_1, object_2) names used to build candidate
/// prompts for one relation of a record.
pub type PairNamer<'a> = dyn Fn(&SceneRecord, usize) -> Result<(String, String)> + 'a;

fn normalized(v: Array1<f64>) -> Array1<f64> {
    let norm = v.dot(&v).sqrt().max(1e-30);
    v / norm
}

/// Scores every split relation whose predicate is in the vocabulary:
/// relation visual feature from the union-box crop, candidate captions
/// `"{o1} {p} {o2}"` per predicate through the relation text encoder,
/// cosine ranking. Relations with out-of-vocabulary predicates are
/// excluded from the denominator.
fn rank_relations(
    model: &ScenarioModel,
    data_dir: &Path,
    manifest: &DatasetManifest,
    split: Split,
    predicate_vocab: &[String],
    task: &str,
    namer: &PairNamer,
) -> Result<MetricsReport> {
    if predicate_vocab.is_empty() {
        return Err(ModelError::InvalidConfig(
            "predicate vocabulary must be non-empty".into(),
        ));
    }
    let mut text_cache: BTreeMap<String, Array1<f64>> = BTreeMap::new();
    let mut rows: Vec<Array1<f64>> = Vec::new();
    let mut truths: Vec<usize> = Vec::new();
    let mut excluded = 0usize;
    for &id in manifest.split_ids(split) {
        let record = load_scene(data_dir, id)?;
        for (rel_idx, rel) in record.relations.iter().enumerate() {
            let Some(truth) = predicate_vocab.iter().position(|p| *p == rel.triplet.1) else {
                excluded += 1;
                continue;
            };
            let bbox = union_bbox(&record, rel_idx).ok_or_else(|| {
                ModelError::InvalidInput(format!("relation {rel_idx} of scene {id} has no union box"))
            })?;
            let crop = model.prepare_crop(&record.image, &bbox);
            let (emb, _) = model.embed_image(Tower::VisualRelation, &crop)?;
            let emb = normalized(emb);
            let (o1, o2) = namer(&record, rel_idx)?;
            let mut scores = Array1::zeros(predicate_vocab.len());
            for (c, p) in predicate_vocab.iter().enumerate() {
                let caption = format!("{o1} {p} {o2}");
                let text = text_cache.entry(caption.clone()).or_insert_with(|| {
                    normalized(model.embed_text(Tower::TextRelation, &caption))
                });
                scores[c] = emb.dot(text);
            }
            rows.push(scores);
            truths.push(truth);
        }
    }
    let mut report = MetricsReport::new(task);
    if excluded > 0 {
        report
            .warnings
            .push(format!("{excluded} relations with out-of-vocabulary predicates excluded"));
    }
    if rows.is_empty() {
        report
            .warnings
            .push("no relations with in-vocabulary predicates in the split".into());
    } else {
        let mut scores = Array2::zeros((rows.len(), predicate_vocab.len()));
        for (i, row) in rows.iter().enumerate() {
            scores.row_mut(i).assign(row);
        }
        fill_topk(&mut report, &scores, &truths)?;
    }
    report.n_items = rows.len();
    report.config = serde_json::json!({
        "split": split.as_str(),
        "predicates": predicate_vocab.len(),
    });
    report.validate()?;
    Ok(report)
}

/// PredCls: ground-truth object names form the candidate prompts.
pub fn predicate_classification(
    model: &ScenarioModel,
    data_dir: &Path,
    manifest: &DatasetManifest,
    split: Split,
    predicate_vocab: &[String],
) -> Result<MetricsReport> {
    rank_relations(
        model,
        data_dir,
        manifest,
        split,
        predicate_vocab,
        "predcls",
        &|record, rel_idx| {
            let (i, j) = record.relations[rel_idx].object_indices;
            Ok((record.objects[i].name.clone(), record.objects[j].name.clone()))
        },
    )
}

/// SGCls with an injectable object classifier mapping (record, object
/// index) to a predicted name. The oracle classifier that returns the
/// ground-truth name makes this identical to PredCls.
pub fn scene_graph_classification_with(
    model: &ScenarioModel,
    data_dir: &Path,
    manifest: &DatasetManifest,
    split: Split,
    predicate_vocab: &[String],
    classify: &dyn Fn(&SceneRecord, usize) -> Result<String>,
) -> Result<MetricsReport> {
    rank_relations(
        model,
        data_dir,
        manifest,
        split,
        predicate_vocab,
        "sgcls",
        &|record, rel_idx| {
            let (i, j) = record.relations[rel_idx].object_indices;
            Ok((classify(record, i)?, classify(record, j)?))
        },
    )
}

/// SGCls: each participating object crop is classified against the
/// object vocabulary via the object encoders, and the predicted names
/// replace the ground-truth ones in the candidate prompts.
pub fn scene_graph_classification(
    model: &ScenarioModel,
    data_dir: &Path,
    manifest: &DatasetManifest,
    split: Split,
    object_vocab: &[String],
    predicate_vocab: &[String],
) -> Result<MetricsReport> {
    if object_vocab.is_empty() {
        return Err(ModelError::InvalidConfig(
            "object vocabulary must be non-empty".into(),
        ));
    }
    let class_rows: Vec<Array1<f64>> = object_vocab
        .iter()
        .map(|name| normalized(model.embed_text(Tower::TextObject, name)))
        .collect();
    let classify = move |record: &SceneRecord, obj_idx: usize| -> Result<String> {
        let crop = model.prepare_crop(&record.image, &record.objects[obj_idx].bbox);
        let (emb, _) = model.embed_image(Tower::VisualObject, &crop)?;
        let emb = normalized(emb);
        let mut best = 0usize;
        let mut best_score = f64::NEG_INFINITY;
        for (c, row) in class_rows.iter().enumerate() {
            let s = emb.dot(row);
            if s > best_score {
                best = c;
                best_score = s;
            }
        }
        Ok(object_vocab[best].clone())
    };
    scene_graph_classification_with(model, data_dir, manifest, split, predicate_vocab, &classify)
}

/// The `n` most frequent predicates of a split, ties broken by name
/// ascending.
pub fn most_frequent_predicates(
    data_dir: &Path,
    manifest: &DatasetManifest,
    split: Split,
    n: usize,
) -> Result<Vec<String>> {
    if n == 0 {
        return Err(ModelError::InvalidParameter(
            "predicate count must be positive".into(),
        ));
    }
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for &id in manifest.split_ids(split) {
        let record = load_scene(data_dir, id)?;
        for rel in &record.relations {
            *counts.entry(rel.triplet.1.clone()).or_default() += 1;
        }
    }
    let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    Ok(ranked.into_iter().take(n).map(|(p, _)| p).collect())
}
