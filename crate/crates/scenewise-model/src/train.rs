//! The training loop: seeded batch order, warmup-cosine learning rate,
//! scheduled distillation weight, AdamW update, EMA teacher refresh,
//! per-step metrics, and per-epoch checkpoints.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use scenewise_data::{load_scene, DatasetManifest, SceneRecord, Split};
use serde::{Deserialize, Serialize};

use crate::checkpoint::save_checkpoint;
use crate::ema::{ema_update, EMAState};
use crate::encoders::{EncoderConfig, ScenarioModel, TokenVocab};
use crate::error::{ModelError, Result};
use crate::eval::DEFAULT_TEMPLATES;
use crate::nn::GradStore;
use crate::objectives::{batch_loss_nodes, read_breakdown, LossBreakdown, TempNodes};
use crate::optim::{lambda_kd, lr_at_step, AdamW, LambdaSchedule};
use crate::tape::Tape;

/// Optimization hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub weight_decay: f64,
    pub warmup_fraction: f64,
    pub lambda_ca: f64,
    pub lambda_kd: LambdaSchedule,
    pub ema_decay: f64,
    pub ema_warmup_steps: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 12,
            batch_size: 16,
            base_lr: 2e-5,
            weight_decay: 0.2,
            warmup_fraction: 0.10,
            lambda_ca: 1.0,
            lambda_kd: LambdaSchedule::anneal(1.0, 0.0),
            ema_decay: 0.9995,
            ema_warmup_steps: 2000,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(ModelError::InvalidConfig(
                "epochs and batch size must be positive".into(),
            ));
        }
        if !(self.base_lr > 0.0) {
            return Err(ModelError::InvalidConfig("base_lr must be positive".into()));
        }
        if !(0.0 < self.warmup_fraction && self.warmup_fraction < 1.0) {
            return Err(ModelError::InvalidConfig(
                "warmup_fraction must lie in (0, 1)".into(),
            ));
        }
        if !(self.lambda_ca > 0.0) {
            return Err(ModelError::InvalidConfig("lambda_ca must be positive".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(ModelError::InvalidConfig(
                "weight_decay must be nonnegative".into(),
            ));
        }
        if !(0.0 < self.ema_decay && self.ema_decay < 1.0) {
            return Err(ModelError::InvalidConfig(
                "ema_decay must lie in (0, 1)".into(),
            ));
        }
        self.lambda_kd.validate()
    }
}

/// One metrics-log line, serialized as JSON per step.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub epoch: usize,
    pub l_total: f64,
    pub l_kd: f64,
    pub l_ca: f64,
    pub ca_global: f64,
    pub ca_object: f64,
    pub ca_relation: f64,
    pub lambda_kd: f64,
    pub lr: f64,
    pub temp_global: f64,
    pub temp_object: f64,
    pub temp_relation: f64,
    pub tau: f64,
}

/// Result summary of a training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint_path: PathBuf,
    pub metrics_path: PathBuf,
    pub steps: usize,
    pub first_loss: f64,
    pub final_loss: f64,
}

/// Builds the token vocabulary a model trained on this dataset should use:
/// dataset labels, antonym predicates, and prompt-template wording.
pub fn training_vocab(manifest: &DatasetManifest) -> TokenVocab {
    let template_phrases: Vec<String> = DEFAULT_TEMPLATES
        .iter()
        .map(|t| t.replace("{label}", ""))
        .collect();
    let refs: Vec<&str> = template_phrases.iter().map(String::as_str).collect();
    TokenVocab::from_label_vocab(&manifest.vocab, &refs)
}

fn metrics_line(w: &mut impl Write, m: &StepMetrics, path: &Path) -> Result<()> {
    let line = serde_json::to_string(m)
        .map_err(|e| ModelError::Serde { path: path.into(), source: e })?;
    writeln!(w, "{line}").map_err(|e| ModelError::io(path, e))
}

/// Runs one optimization step over a batch of records. Returns the loss
/// breakdown. Exposed for tests that need step-level control.
pub fn train_step(
    model: &mut ScenarioModel,
    optimizer: &mut AdamW,
    ema: &mut EMAState,
    records: &[SceneRecord],
    lambda_kd_value: f64,
    lambda_ca: f64,
    lr: f64,
    global_step: usize,
) -> Result<LossBreakdown> {
    let mut tape = Tape::new();
    let binding = model.params.bind(&mut tape, true);
    let temps = TempNodes {
        global: binding.id("temp.global"),
        object: binding.id("temp.object"),
        relation: binding.id("temp.relation"),
        tau_log: binding.id("tau.log"),
    };
    let mut scenes = Vec::with_capacity(records.len());
    let mut teachers = Vec::with_capacity(records.len());
    for record in records {
        scenes.push(model.scene_nodes(&mut tape, &binding, record, true)?);
        teachers.push(model.forward_scene_with(&ema.teacher, record)?);
    }
    let loss = batch_loss_nodes(&mut tape, &scenes, &teachers, &temps, lambda_kd_value, lambda_ca)?;
    let breakdown = read_breakdown(&tape, &loss, lambda_kd_value, lambda_ca);
    if !breakdown.l_total.is_finite() {
        return Err(ModelError::NonFiniteLoss {
            step: global_step as u64,
            detail: format!(
                "l_kd={}, l_ca={}, temps=({}, {}, {})",
                breakdown.l_kd,
                breakdown.l_ca,
                model.temperature(crate::encoders::Level::Global),
                model.temperature(crate::encoders::Level::Object),
                model.temperature(crate::encoders::Level::Relation),
            ),
        });
    }
    tape.backward(loss.total);
    let mut grads = GradStore::new();
    binding.collect_grads(&tape, &mut grads);
    optimizer.step(&mut model.params, &grads, lr);
    ema_update(ema, &model.params, global_step)?;
    Ok(breakdown)
}

/// Trains a fresh model on the manifest's train split. Writes per-epoch
/// checkpoints, a final checkpoint, and a line-delimited metrics log under
/// `out_dir`; returns their paths and the first/last loss values.
pub fn train(
    config: &TrainConfig,
    encoder: &EncoderConfig,
    data_dir: &Path,
    manifest: &DatasetManifest,
    out_dir: &Path,
) -> Result<TrainOutcome> {
    config.validate()?;
    let image_size = manifest.config.image_size as usize;
    encoder.validate(image_size)?;
    std::fs::create_dir_all(out_dir).map_err(|e| ModelError::io(out_dir, e))?;

    let vocab = training_vocab(manifest);
    let mut model = ScenarioModel::new(encoder.clone(), image_size, vocab, config.seed)?;
    let mut optimizer = AdamW::new(config.weight_decay);
    let mut ema = EMAState::new(&model.params, config.ema_decay, config.ema_warmup_steps)?;

    let train_ids: Vec<usize> = manifest.split_ids(Split::Train).to_vec();
    let steps_per_epoch = train_ids.len() / config.batch_size;
    if steps_per_epoch == 0 {
        return Err(ModelError::InvalidConfig(format!(
            "train split of {} scenes cannot fill a batch of {}",
            train_ids.len(),
            config.batch_size
        )));
    }
    let total_steps = steps_per_epoch * config.epochs;

    let metrics_path = out_dir.join("metrics.jsonl");
    let metrics_file =
        File::create(&metrics_path).map_err(|e| ModelError::io(&metrics_path, e))?;
    let mut metrics = BufWriter::new(metrics_file);

    let config_echo = serde_json::json!({
        "train": config,
        "encoder": encoder,
        "image_size": image_size,
    });

    let mut first_loss = f64::NAN;
    let mut final_loss = f64::NAN;
    let mut global_step = 0;
    for epoch in 0..config.epochs {
        let mut order = train_ids.clone();
        let mut rng = ChaCha20Rng::seed_from_u64(
            config
                .seed
                .wrapping_mul(0x9E37_79B9_7F4A_7C15)
                .wrapping_add(epoch as u64),
        );
        order.shuffle(&mut rng);
        let progress = (epoch + 1) as f64 / config.epochs as f64;
        let lambda = lambda_kd(progress, &config.lambda_kd)?;
        let mut epoch_loss = 0.0;
        for chunk in order.chunks_exact(config.batch_size) {
            let records: Vec<SceneRecord> = chunk
                .iter()
                .map(|&id| load_scene(data_dir, id))
                .collect::<std::result::Result<_, _>>()?;
            let lr = lr_at_step(global_step, total_steps, config.base_lr, config.warmup_fraction)?;
            let breakdown = train_step(
                &mut model,
                &mut optimizer,
                &mut ema,
                &records,
                lambda,
                config.lambda_ca,
                lr,
                global_step,
            )?;
            if global_step == 0 {
                first_loss = breakdown.l_total;
            }
            final_loss = breakdown.l_total;
            epoch_loss += breakdown.l_total;
            let m = StepMetrics {
                step: global_step,
                epoch,
                l_total: breakdown.l_total,
                l_kd: breakdown.l_kd,
                l_ca: breakdown.l_ca,
                ca_global: breakdown.ca_global,
                ca_object: breakdown.ca_object,
                ca_relation: breakdown.ca_relation,
                lambda_kd: lambda,
                lr,
                temp_global: model.temperature(crate::encoders::Level::Global),
                temp_object: model.temperature(crate::encoders::Level::Object),
                temp_relation: model.temperature(crate::encoders::Level::Relation),
                tau: model.tau(),
            };
            metrics_line(&mut metrics, &m, &metrics_path)?;
            global_step += 1;
        }
        metrics.flush().map_err(|e| ModelError::io(&metrics_path, e))?;
        let ckpt = out_dir.join(format!("checkpoint_epoch{epoch}.swck"));
        save_checkpoint(&ckpt, &model, &optimizer, &ema, config_echo.clone())?;
        eprintln!(
            "epoch {epoch}: mean loss {:.4} over {steps_per_epoch} steps (lambda_kd {lambda:.3})",
            epoch_loss / steps_per_epoch as f64
        );
    }
    let final_path = out_dir.join("checkpoint_final.swck");
    save_checkpoint(&final_path, &model, &optimizer, &ema, config_echo)?;
    metrics.flush().map_err(|e| ModelError::io(&metrics_path, e))?;
    Ok(TrainOutcome {
        checkpoint_path: final_path,
        metrics_path,
        steps: global_step,
        first_loss,
        final_loss,
    })
}
