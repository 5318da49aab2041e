//! Relation localization: a small convolutional decoder over relation
//! encoder patch tokens regresses the ground-truth focus mask.

use std::path::Path;

use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use scenewise_data::kernels::focus_weight_map;
use scenewise_data::{load_scene, union_bbox, BoundingBox, DatasetManifest, SceneRecord, Split};
use serde::{Deserialize, Serialize};

use crate::encoders::{ScenarioModel, Tower};
use crate::error::{ModelError, Result};
use crate::eval::metrics::{binary_dice_iou, mask_mae, MetricsReport};
use crate::interp::bilinear_upsample_matrix;
use crate::nn::{linear, normal_init, GradStore, ParamStore};
use crate::optim::AdamW;
use crate::tape::{NodeId, Tape};

/// Decoder layout and fine-tuning knobs. Kernel sizes are fixed at
/// 3, 3, 1; the final channel width must be 1.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LocalizationDecoderConfig {
    /// Channel widths of the three convolution stages.
    pub channels: (usize, usize, usize),
    /// Train only the decoder when true; also fine-tune the relation
    /// visual encoder when false.
    pub frozen_encoder: bool,
    /// Adaptive-moment learning rate for decoder (and encoder) updates.
    pub learning_rate: f64,
    /// Passes over the train-split relations.
    pub train_epochs: usize,
    /// Seed for decoder initialization and epoch shuffling.
    pub seed: u64,
}

impl Default for LocalizationDecoderConfig {
    fn default() -> Self {
        LocalizationDecoderConfig {
            channels: (256, 64, 1),
            frozen_encoder: true,
            learning_rate: 1e-4,
            train_epochs: 2,
            seed: 0,
        }
    }
}

impl LocalizationDecoderConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |msg: String| Err(ModelError::InvalidConfig(msg));
        let (c1, c2, c3) = self.channels;
        if c1 == 0 || c2 == 0 {
            return err("decoder channel widths must be positive".into());
        }
        if c3 != 1 {
            return err(format!("final decoder channel width must be 1, got {c3}"));
        }
        if !(self.learning_rate > 0.0) {
            return err(format!("learning rate must be positive, got {}", self.learning_rate));
        }
        if self.train_epochs == 0 {
            return err("train_epochs must be at least 1".into());
        }
        Ok(())
    }

    fn task_name(&self) -> &'static str {
        if self.frozen_encoder {
            "rel_localization_frozen"
        } else {
            "rel_localization_trainable"
        }
    }
}

/// Copies the union-box region and zeroes every pixel outside it.
pub fn zero_outside_union(image: &Array3<f64>, bbox: &BoundingBox) -> Array3<f64> {
    let (h, w, c) = image.dim();
    let x0 = (bbox.x_min as usize).min(w - 1);
    let y0 = (bbox.y_min as usize).min(h - 1);
    let x1 = (bbox.x_max as usize).clamp(x0 + 1, w);
    let y1 = (bbox.y_max as usize).clamp(y0 + 1, h);
    let mut out = Array3::zeros((h, w, c));
    for y in y0..y1 {
        for x in x0..x1 {
            for ch in 0..c {
                out[[y, x, ch]] = image[[y, x, ch]];
            }
        }
    }
    out
}

/// 3x3 neighborhoods (row-major window order, None off the grid) for a
/// side x side token grid.
fn conv3x3_neighbors(side: usize) -> Vec<Vec<Option<usize>>> {
    let mut neighbors = Vec::with_capacity(side * side);
    for y in 0..side as isize {
        for x in 0..side as isize {
            let mut cell = Vec::with_capacity(9);
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (ny, nx) = (y + dy, x + dx);
                    if ny >= 0 && ny < side as isize && nx >= 0 && nx < side as isize {
                        cell.push(Some((ny * side as isize + nx) as usize));
                    } else {
                        cell.push(None);
                    }
                }
            }
            neighbors.push(cell);
        }
    }
    neighbors
}

fn init_decoder(d: usize, channels: (usize, usize, usize), seed: u64) -> ParamStore {
    let (c1, c2, _) = channels;
    let mut rng = ChaCha20Rng::seed_from_u64(seed ^ 0x10CA_11D0_u64);
    let mut dec = ParamStore::new();
    dec.insert("dec.c1.w", normal_init(&mut rng, 9 * d, c1, 0.02));
    dec.insert("dec.c1.b", Array2::zeros((1, c1)));
    dec.insert("dec.c2.w", normal_init(&mut rng, 9 * c1, c2, 0.02));
    dec.insert("dec.c2.b", Array2::zeros((1, c2)));
    dec.insert("dec.c3.w", normal_init(&mut rng, c2, 1, 0.02));
    dec.insert("dec.c3.b", Array2::zeros((1, 1)));
    dec
}

/// Conv3x3 -> ReLU -> Conv3x3 -> ReLU -> Conv1x1 over the token grid;
/// returns per-patch logits (side*side x 1).
fn decoder_logits(
    tape: &mut Tape,
    dec: &crate::nn::ParamBinding,
    tokens: NodeId,
    neighbors: &[Vec<Option<usize>>],
) -> NodeId {
    let u1 = tape.unfold_rows(tokens, neighbors);
    let h1 = linear(tape, u1, dec.id("dec.c1.w"), dec.id("dec.c1.b"));
    let h1 = tape.relu(h1);
    let u2 = tape.unfold_rows(h1, neighbors);
    let h2 = linear(tape, u2, dec.id("dec.c2.w"), dec.id("dec.c2.b"));
    let h2 = tape.relu(h2);
    linear(tape, h2, dec.id("dec.c3.w"), dec.id("dec.c3.b"))
}

/// Ground-truth focus mask for a relation, validated against the image
/// resolution.
fn truth_mask(
    record: &SceneRecord,
    rel_idx: usize,
    sigma: f64,
) -> Result<Array2<f64>> {
    let (h, w, _) = record.image.dim();
    let rel = &record.relations[rel_idx];
    let mask = focus_weight_map(rel.centers.0, rel.centers.1, sigma, (h, w))?;
    if mask.dim() != (h, w) {
        return Err(ModelError::InvalidInput(format!(
            "mask resolution {:?} does not match image {:?}",
            mask.dim(),
            (h, w)
        )));
    }
    Ok(mask)
}

struct LocalizationRun<'a> {
    model: &'a ScenarioModel,
    encoder: ParamStore,
    decoder: ParamStore,
    neighbors: Vec<Vec<Option<usize>>>,
    upsample: Array2<f64>,
    sigma: f64,
    image_hw: (usize, usize),
    cfg: LocalizationDecoderConfig,
}

impl<'a> LocalizationRun<'a> {
    fn new(model: &'a ScenarioModel, manifest: &DatasetManifest, cfg: &LocalizationDecoderConfig) -> Self {
        let side = model.config.grid_side(model.image_size);
        let h = model.image_size;
        LocalizationRun {
            model,
            encoder: model.params.clone(),
            decoder: init_decoder(model.config.embed_dim, cfg.channels, cfg.seed),
            neighbors: conv3x3_neighbors(side),
            upsample: bilinear_upsample_matrix(side, side, h, h),
            sigma: manifest.config.rbf_sigma,
            image_hw: (h, h),
            cfg: cfg.clone(),
        }
    }

    /// Patch tokens of the masked image under the current encoder state.
    fn tokens_value(&self, masked: &Array3<f64>) -> Result<Array2<f64>> {
        let mut tape = Tape::new();
        let binding = self.encoder.bind(&mut tape, false);
        let (_, tokens) = self
            .model
            .image_nodes(&mut tape, &binding, Tower::VisualRelation, masked)?;
        Ok(tape.value(tokens).clone())
    }

    /// One squared-error step on a single relation item. `masked` feeds
    /// the encoder when it is trainable, `cached_tokens` short-circuits
    /// the frozen path.
    fn train_step(
        &mut self,
        masked: Option<&Array3<f64>>,
        cached_tokens: Option<&Array2<f64>>,
        mask: &Array2<f64>,
        dec_opt: &mut AdamW,
        enc_opt: &mut AdamW,
    ) -> Result<f64> {
        let mut tape = Tape::new();
        let dec_binding = self.decoder.bind(&mut tape, true);
        let (tokens, enc_binding) = if self.cfg.frozen_encoder {
            let tokens = tape.constant(cached_tokens.expect("frozen path caches tokens").clone());
            (tokens, None)
        } else {
            let binding = self.encoder.bind(&mut tape, true);
            let (_, tokens) = self.model.image_nodes(
                &mut tape,
                &binding,
                Tower::VisualRelation,
                masked.expect("trainable path feeds images"),
            )?;
            (tokens, Some(binding))
        };
        let logits = decoder_logits(&mut tape, &dec_binding, tokens, &self.neighbors);
        let up = {
            let u = tape.constant(self.upsample.clone());
            tape.matmul(u, logits)
        };
        let prob = tape.sigmoid(up);
        let n = mask.len();
        let target = tape.constant(
            Array2::from_shape_vec((n, 1), mask.iter().copied().collect())
                .expect("mask flattens to a column"),
        );
        let diff = tape.sub(prob, target);
        let sq = tape.mul(diff, diff);
        let loss = tape.mean_all(sq);
        let loss_value = tape.value(loss)[[0, 0]];
        if !loss_value.is_finite() {
            return Err(ModelError::InvalidInput(format!(
                "non-finite localization loss {loss_value}"
            )));
        }
        tape.backward(loss);
        let mut dec_grads = GradStore::new();
        dec_binding.collect_grads(&tape, &mut dec_grads);
        dec_opt.step(&mut self.decoder, &dec_grads, self.cfg.learning_rate);
        if let Some(binding) = enc_binding {
            let mut enc_grads = GradStore::new();
            binding.collect_grads(&tape, &mut enc_grads);
            enc_opt.step(&mut self.encoder, &enc_grads, self.cfg.learning_rate);
        }
        Ok(loss_value)
    }

    /// Predicted probability mask for one masked image.
    fn predict(&self, masked: &Array3<f64>) -> Result<Array2<f64>> {
        let mut tape = Tape::new();
        let dec_binding = self.decoder.bind(&mut tape, false);
        let enc_binding = self.encoder.bind(&mut tape, false);
        let (_, tokens) = self
            .model
            .image_nodes(&mut tape, &enc_binding, Tower::VisualRelation, masked)?;
        let logits = decoder_logits(&mut tape, &dec_binding, tokens, &self.neighbors);
        let up = {
            let u = tape.constant(self.upsample.clone());
            tape.matmul(u, logits)
        };
        let prob = tape.sigmoid(up);
        let flat = tape.value(prob);
        let (h, w) = self.image_hw;
        Ok(Array2::from_shape_fn((h, w), |(y, x)| flat[[y * w + x, 0]]))
    }
}

/// Trains the mask decoder on the train split and reports Dice, IoU
/// (masks thresholded at 0.5), and MAE (raw masks) on the eval split.
/// The encoder input is the scene image with everything outside the
/// relation's union box zeroed.
pub fn relation_localization(
    model: &ScenarioModel,
    data_dir: &Path,
    manifest: &DatasetManifest,
    train_split: Split,
    eval_split: Split,
    cfg: &LocalizationDecoderConfig,
) -> Result<MetricsReport> {
    cfg.validate()?;
    let mut run = LocalizationRun::new(model, manifest, cfg);
    let mut dec_opt = AdamW::new(0.0);
    let mut enc_opt = AdamW::new(0.0);
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed.wrapping_add(0x10C));

    if cfg.frozen_encoder {
        // Tokens never change, so embed each item once up front.
        let mut items: Vec<(Array2<f64>, Array2<f64>)> = Vec::new();
        for &id in manifest.split_ids(train_split) {
            let record = load_scene(data_dir, id)?;
            for rel_idx in 0..record.relations.len() {
                let bbox = union_bbox(&record, rel_idx).expect("relation index in range");
                let masked = zero_outside_union(&record.image, &bbox);
                let tokens = run.tokens_value(&masked)?;
                let mask = truth_mask(&record, rel_idx, run.sigma)?;
                items.push((tokens, mask));
            }
        }
        if items.is_empty() {
            return Err(ModelError::InvalidInput("train split has no relations".into()));
        }
        let mut order: Vec<usize> = (0..items.len()).collect();
        for _ in 0..cfg.train_epochs {
            order.shuffle(&mut rng);
            for &i in &order {
                let (tokens, mask) = &items[i];
                run.train_step(None, Some(tokens), mask, &mut dec_opt, &mut enc_opt)?;
            }
        }
    } else {
        // Streaming passes; scene order shuffles, relations stay grouped.
        let mut ids: Vec<usize> = manifest.split_ids(train_split).to_vec();
        if ids.is_empty() {
            return Err(ModelError::InvalidInput("train split is empty".into()));
        }
        for _ in 0..cfg.train_epochs {
            ids.shuffle(&mut rng);
            for &id in &ids {
                let record = load_scene(data_dir, id)?;
                for rel_idx in 0..record.relations.len() {
                    let bbox = union_bbox(&record, rel_idx).expect("relation index in range");
                    let masked = zero_outside_union(&record.image, &bbox);
                    let mask = truth_mask(&record, rel_idx, run.sigma)?;
                    run.train_step(Some(&masked), None, &mask, &mut dec_opt, &mut enc_opt)?;
                }
            }
        }
    }

    let mut dice_sum = 0.0;
    let mut iou_sum = 0.0;
    let mut mae_sum = 0.0;
    let mut n = 0usize;
    for &id in manifest.split_ids(eval_split) {
        let record = load_scene(data_dir, id)?;
        for rel_idx in 0..record.relations.len() {
            let bbox = union_bbox(&record, rel_idx).expect("relation index in range");
            let masked = zero_outside_union(&record.image, &bbox);
            let pred = run.predict(&masked)?;
            let mask = truth_mask(&record, rel_idx, run.sigma)?;
            let (dice, iou) = binary_dice_iou(&pred, &mask, 0.5)?;
            dice_sum += dice;
            iou_sum += iou;
            mae_sum += mask_mae(&pred, &mask)?;
            n += 1;
        }
    }
    if n == 0 {
        return Err(ModelError::InvalidInput("eval split has no relations".into()));
    }

    let mut report = MetricsReport::new(cfg.task_name());
    report.dice = Some(dice_sum / n as f64);
    report.iou = Some(iou_sum / n as f64);
    report.mae = Some(mae_sum / n as f64);
    report.n_items = n;
    report.config = serde_json::json!({
        "train_split": train_split.as_str(),
        "eval_split": eval_split.as_str(),
        "channels": [cfg.channels.0, cfg.channels.1, cfg.channels.2],
        "kernels": [3, 3, 1],
        "frozen_encoder": cfg.frozen_encoder,
        "learning_rate": cfg.learning_rate,
        "train_epochs": cfg.train_epochs,
        "seed": cfg.seed,
    });
    report.validate()?;
    Ok(report)
}
