//! Linear probing: a single trainable d -> C head over frozen backbone
//! embeddings.

use std::collections::BTreeSet;
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use scenewise_data::{DatasetManifest, Split};

use crate::encoders::{Level, ScenarioModel};
use crate::error::{ModelError, Result};
use crate::eval::items::{collect_level_items, level_classes};
use crate::eval::metrics::{fill_topk, MetricsReport};
use crate::nn::ParamStore;
use crate::optim::AdamW;
use crate::tape::Tape;

const PROBE_EPOCHS: usize = 6;
const PROBE_LR: f64 = 2e-5;
const PROBE_BATCH: usize = 32;

/// Maps labels to class indices, erroring on labels outside the list.
fn truth_indices(labels: &[String], classes: &[String], task: &str) -> Result<Vec<usize>> {
    labels
        .iter()
        .map(|label| {
            classes
                .iter()
                .position(|c| c == label)
                .ok_or_else(|| ModelError::MissingLabel {
                    task: task.to_string(),
                    label: label.clone(),
                })
        })
        .collect()
}

/// Runs the cross-entropy probe training and returns the learned head.
fn train_head(
    features: &Array2<f64>,
    truths: &[usize],
    n_classes: usize,
) -> (Array2<f64>, Array2<f64>) {
    let d = features.ncols();
    let mut head = ParamStore::new();
    head.insert("probe.w", Array2::zeros((d, n_classes)));
    head.insert("probe.b", Array2::zeros((1, n_classes)));
    let mut optimizer = AdamW::new(0.0);
    let mut order: Vec<usize> = (0..features.nrows()).collect();
    let mut rng = ChaCha20Rng::seed_from_u64(0x5EED_B0A7);
    for _ in 0..PROBE_EPOCHS {
        order.shuffle(&mut rng);
        for batch in order.chunks(PROBE_BATCH) {
            let b = batch.len();
            let mut x = Array2::zeros((b, d));
            let mut onehot = Array2::zeros((b, n_classes));
            for (i, &item) in batch.iter().enumerate() {
                x.row_mut(i).assign(&features.row(item));
                onehot[[i, truths[item]]] = 1.0;
            }
            let mut tape = Tape::new();
            let binding = head.bind(&mut tape, true);
            let x = tape.constant(x);
            let logits = tape.matmul(x, binding.id("probe.w"));
            let logits = tape.add_row(logits, binding.id("probe.b"));
            let logp = tape.log_softmax_rows(logits);
            let picked = {
                let hot = tape.constant(onehot);
                tape.mul(logp, hot)
            };
            let total = tape.sum_all(picked);
            let loss = tape.scale(total, -1.0 / b as f64);
            tape.backward(loss);
            let mut grads = crate::nn::GradStore::new();
            binding.collect_grads(&tape, &mut grads);
            optimizer.step(&mut head, &grads, PROBE_LR);
        }
    }
    (head.get("probe.w").clone(), head.get("probe.b").clone())
}

/// Trains a linear head on frozen train-split embeddings and reports
/// top-k accuracy on the test split. Classes present only in the test
/// split are recorded as warnings but still scored.
pub fn linear_probe(
    model: &ScenarioModel,
    data_dir: &Path,
    manifest: &DatasetManifest,
    train_split: Split,
    test_split: Split,
    task: Level,
) -> Result<MetricsReport> {
    let task_name = match task {
        Level::Global => "probe_actions",
        Level::Object => "probe_objects",
        Level::Relation => "probe_relations",
    };
    let classes = level_classes(manifest, task);
    if classes.is_empty() {
        return Err(ModelError::InvalidConfig(
            "label vocabulary for the probe task is empty".into(),
        ));
    }
    let train = collect_level_items(model, data_dir, manifest, train_split, task)?;
    let test = collect_level_items(model, data_dir, manifest, test_split, task)?;
    if train.labels.is_empty() || test.labels.is_empty() {
        return Err(ModelError::InvalidInput(
            "probe requires non-empty train and test splits".into(),
        ));
    }
    let train_truths = truth_indices(&train.labels, &classes, task_name)?;
    let test_truths = truth_indices(&test.labels, &classes, task_name)?;

    let seen: BTreeSet<usize> = train_truths.iter().copied().collect();
    let mut report = MetricsReport::new(task_name);
    for c in test_truths.iter().collect::<BTreeSet<_>>() {
        if !seen.contains(c) {
            report
                .warnings
                .push(format!("class {:?} present in test but absent in train", classes[*c]));
        }
    }

    let (w, b) = train_head(&train.embeddings, &train_truths, classes.len());
    let mut scores = test.embeddings.dot(&w);
    for mut row in scores.rows_mut() {
        row += &b.row(0);
    }
    fill_topk(&mut report, &scores, &test_truths)?;
    report.n_items = test_truths.len();
    report.config = serde_json::json!({
        "train_split": train_split.as_str(),
        "test_split": test_split.as_str(),
        "classes": classes.len(),
        "epochs": PROBE_EPOCHS,
        "lr": PROBE_LR,
        "batch_size": PROBE_BATCH,
    });
    report.validate()?;
    Ok(report)
}
