//! Versioned binary checkpoints: a JSON header describing configuration and
//! tensor shapes, followed by little-endian f64 blobs for the student
//! parameters, optimizer moments, and the EMA teacher.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::ema::EMAState;
use crate::encoders::{EncoderConfig, ScenarioModel, TokenVocab};
use crate::error::{ModelError, Result};
use crate::nn::ParamStore;
use crate::optim::AdamW;

const MAGIC: &[u8; 4] = b"SWCK";
const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct AdamHeader {
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    t: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct EmaHeader {
    decay: f64,
    warmup_steps: usize,
    step: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    version: u32,
    encoder: EncoderConfig,
    image_size: usize,
    vocab: Vec<String>,
    adam: AdamHeader,
    ema: EmaHeader,
    /// (name, rows, cols) for every tensor, in serialization order.
    shapes: Vec<(String, usize, usize)>,
    /// Run-configuration echo, free-form.
    config_echo: serde_json::Value,
    /// Reserved slot for externally imported encoder weights.
    imported_weights: Option<serde_json::Value>,
}

/// Everything needed to resume training or run evaluation.
pub struct Checkpoint {
    pub model: ScenarioModel,
    pub optimizer: AdamW,
    pub ema: EMAState,
    pub config_echo: serde_json::Value,
}

fn write_store(w: &mut impl Write, store: &ParamStore, path: &Path) -> Result<()> {
    for (_, tensor) in store.iter() {
        for v in tensor.iter() {
            w.write_all(&v.to_le_bytes())
                .map_err(|e| ModelError::io(path, e))?;
        }
    }
    Ok(())
}

fn write_moments(
    w: &mut impl Write,
    moments: &BTreeMap<String, Array2<f64>>,
    shapes: &[(String, usize, usize)],
    path: &Path,
) -> Result<()> {
    // Moments for untouched parameters serialize as zeros so the blob
    // layout always mirrors the parameter list.
    for (name, rows, cols) in shapes {
        match moments.get(name) {
            Some(t) => {
                for v in t.iter() {
                    w.write_all(&v.to_le_bytes())
                        .map_err(|e| ModelError::io(path, e))?;
                }
            }
            None => {
                let zero = [0u8; 8];
                for _ in 0..rows * cols {
                    w.write_all(&zero).map_err(|e| ModelError::io(path, e))?;
                }
            }
        }
    }
    Ok(())
}

fn read_tensors(
    r: &mut impl Read,
    shapes: &[(String, usize, usize)],
    path: &Path,
) -> Result<BTreeMap<String, Array2<f64>>> {
    let mut out = BTreeMap::new();
    let mut buf = [0u8; 8];
    for (name, rows, cols) in shapes {
        let mut t = Array2::zeros((*rows, *cols));
        for v in t.iter_mut() {
            r.read_exact(&mut buf).map_err(|e| ModelError::io(path, e))?;
            *v = f64::from_le_bytes(buf);
        }
        out.insert(name.clone(), t);
    }
    Ok(out)
}

/// Writes a checkpoint; the file is self-describing and versioned.
pub fn save_checkpoint(
    path: &Path,
    model: &ScenarioModel,
    optimizer: &AdamW,
    ema: &EMAState,
    config_echo: serde_json::Value,
) -> Result<()> {
    let shapes: Vec<(String, usize, usize)> = model
        .params
        .iter()
        .map(|(n, t)| (n.to_string(), t.nrows(), t.ncols()))
        .collect();
    let header = Header {
        version: VERSION,
        encoder: model.config.clone(),
        image_size: model.image_size,
        vocab: model.vocab.tokens().to_vec(),
        adam: AdamHeader {
            beta1: optimizer.beta1,
            beta2: optimizer.beta2,
            eps: optimizer.eps,
            weight_decay: optimizer.weight_decay,
            t: optimizer.t,
        },
        ema: EmaHeader { decay: ema.decay, warmup_steps: ema.warmup_steps, step: ema.step },
        shapes,
        config_echo,
        imported_weights: None,
    };
    let header_json =
        serde_json::to_vec(&header).map_err(|e| ModelError::Serde { path: path.into(), source: e })?;
    let file = File::create(path).map_err(|e| ModelError::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(MAGIC).map_err(|e| ModelError::io(path, e))?;
    w.write_all(&VERSION.to_le_bytes())
        .map_err(|e| ModelError::io(path, e))?;
    w.write_all(&(header_json.len() as u64).to_le_bytes())
        .map_err(|e| ModelError::io(path, e))?;
    w.write_all(&header_json).map_err(|e| ModelError::io(path, e))?;
    write_store(&mut w, &model.params, path)?;
    let (m, v) = optimizer.moments();
    write_moments(&mut w, m, &header.shapes, path)?;
    write_moments(&mut w, v, &header.shapes, path)?;
    write_store(&mut w, &ema.teacher, path)?;
    w.flush().map_err(|e| ModelError::io(path, e))
}

/// Reads a checkpoint, validating magic, version, and tensor shapes.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let file = File::open(path).map_err(|e| ModelError::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|e| ModelError::io(path, e))?;
    if &magic != MAGIC {
        return Err(ModelError::Checkpoint {
            path: path.into(),
            reason: "bad magic bytes".into(),
        });
    }
    let mut v4 = [0u8; 4];
    r.read_exact(&mut v4).map_err(|e| ModelError::io(path, e))?;
    let version = u32::from_le_bytes(v4);
    if version != VERSION {
        return Err(ModelError::Checkpoint {
            path: path.into(),
            reason: format!("unsupported version {version}"),
        });
    }
    let mut l8 = [0u8; 8];
    r.read_exact(&mut l8).map_err(|e| ModelError::io(path, e))?;
    let header_len = u64::from_le_bytes(l8) as usize;
    let mut header_json = vec![0u8; header_len];
    r.read_exact(&mut header_json)
        .map_err(|e| ModelError::io(path, e))?;
    let header: Header = serde_json::from_slice(&header_json)
        .map_err(|e| ModelError::Serde { path: path.into(), source: e })?;

    let vocab = TokenVocab::from_tokens(header.vocab.clone())?;
    header.encoder.validate(header.image_size)?;
    let params_map = read_tensors(&mut r, &header.shapes, path)?;
    let m = read_tensors(&mut r, &header.shapes, path)?;
    let v = read_tensors(&mut r, &header.shapes, path)?;
    let teacher_map = read_tensors(&mut r, &header.shapes, path)?;
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing).map_err(|e| ModelError::io(path, e))? != 0 {
        return Err(ModelError::Checkpoint {
            path: path.into(),
            reason: "trailing bytes after tensor data".into(),
        });
    }

    let build_store = |map: BTreeMap<String, Array2<f64>>| {
        let mut store = ParamStore::new();
        for (name, tensor) in map {
            store.insert(&name, tensor);
        }
        store
    };
    let params = build_store(params_map);
    let teacher = build_store(teacher_map);

    // A fresh model pins the expected parameter set; the stored tensors
    // must match it exactly.
    let reference = ScenarioModel::new(header.encoder.clone(), header.image_size, vocab.clone(), 0)?;
    for (name, tensor) in reference.params.iter() {
        if !params.contains(name) || params.get(name).dim() != tensor.dim() {
            return Err(ModelError::Checkpoint {
                path: path.into(),
                reason: format!("missing or misshaped tensor {name}"),
            });
        }
    }
    if params.len() != reference.params.len() {
        return Err(ModelError::Checkpoint {
            path: path.into(),
            reason: "parameter count mismatch".into(),
        });
    }

    let model = ScenarioModel {
        config: header.encoder,
        image_size: header.image_size,
        vocab,
        params,
    };
    let mut optimizer = AdamW::new(header.adam.weight_decay);
    optimizer.beta1 = header.adam.beta1;
    optimizer.beta2 = header.adam.beta2;
    optimizer.eps = header.adam.eps;
    optimizer.restore_moments(m, v, header.adam.t);
    let mut ema = EMAState::new(&model.params, header.ema.decay, header.ema.warmup_steps)?;
    ema.teacher = teacher;
    ema.step = header.ema.step;
    Ok(Checkpoint { model, optimizer, ema, config_echo: header.config_echo })
}
