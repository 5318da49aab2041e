//! AdamW with decoupled weight decay and named parameter groups, the
//! warmup-plus-cosine learning-rate schedule, and the piecewise-cosine
//! distillation-weight schedule.

use std::collections::BTreeMap;

use ndarray::Array2;

use crate::error::{ModelError, Result};
use crate::nn::{GradStore, ParamStore};

/// Optimizer treatment of one parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    /// Weight matrices: full learning rate, weight decay applied.
    Main,
    /// Biases, norm gains, class/position embeddings, contrastive
    /// temperatures: full learning rate, no weight decay.
    NoDecay,
    /// The distillation temperature: one tenth the learning rate, no decay.
    Tau,
}

/// Group assignment by name and shape: the distillation temperature is its
/// own group; single-row tensors and positional tables skip weight decay.
pub fn param_group(name: &str, value: &Array2<f64>) -> ParamGroup {
    if name == "tau.log" {
        ParamGroup::Tau
    } else if value.nrows() == 1 || name.ends_with(".pos") {
        ParamGroup::NoDecay
    } else {
        ParamGroup::Main
    }
}

/// AdamW optimizer state over a named parameter store.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Steps taken, used for bias correction.
    pub t: usize,
    m: BTreeMap<String, Array2<f64>>,
    v: BTreeMap<String, Array2<f64>>,
}

impl AdamW {
    pub fn new(weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// Effective learning-rate multiplier of a group.
    pub fn lr_scale(group: ParamGroup) -> f64 {
        match group {
            ParamGroup::Tau => 0.1,
            _ => 1.0,
        }
    }

    /// Weight decay applied to a group.
    pub fn decay_of(&self, group: ParamGroup) -> f64 {
        match group {
            ParamGroup::Main => self.weight_decay,
            _ => 0.0,
        }
    }

    /// One update over all parameters; missing gradients act as zeros
    /// (moments decay, weight decay still applies).
    pub fn step(&mut self, params: &mut ParamStore, grads: &GradStore, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let names: Vec<String> = params.names().map(str::to_string).collect();
        for name in names {
            let shape = params.get(&name).dim();
            let zero = Array2::zeros(shape);
            let g = grads.get(&name).unwrap_or(&zero);
            let group = param_group(&name, params.get(&name));
            let lr_p = lr * Self::lr_scale(group);
            let wd = self.decay_of(group);
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Array2::zeros(shape));
            m.zip_mut_with(g, |mi, gi| *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi);
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Array2::zeros(shape));
            v.zip_mut_with(g, |vi, gi| *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi);
            let m = &self.m[&name];
            let v = &self.v[&name];
            let p = params.get_mut(&name);
            for ((pi, mi), vi) in p.iter_mut().zip(m.iter()).zip(v.iter()) {
                let m_hat = mi / bc1;
                let v_hat = vi / bc2;
                *pi -= lr_p * (m_hat / (v_hat.sqrt() + self.eps) + wd * *pi);
            }
        }
    }

    /// First/second moment tensors for serialization, in name order.
    pub fn moments(&self) -> (&BTreeMap<String, Array2<f64>>, &BTreeMap<String, Array2<f64>>) {
        (&self.m, &self.v)
    }

    /// Restores moment tensors (for checkpoint loading).
    pub fn restore_moments(
        &mut self,
        m: BTreeMap<String, Array2<f64>>,
        v: BTreeMap<String, Array2<f64>>,
        t: usize,
    ) {
        self.m = m;
        self.v = v;
        self.t = t;
    }
}

/// Warmup-plus-cosine learning rate. Linear from `base_lr * 1e-3` to
/// `base_lr` over the first `warmup_fraction` of steps, then cosine decay
/// to zero at the final step.
pub fn lr_at_step(
    step: usize,
    total_steps: usize,
    base_lr: f64,
    warmup_fraction: f64,
) -> Result<f64> {
    if total_steps == 0 || step >= total_steps {
        return Err(ModelError::InvalidParameter(format!(
            "step {step} out of range for {total_steps} total steps"
        )));
    }
    if !(0.0..1.0).contains(&warmup_fraction) {
        return Err(ModelError::InvalidParameter(format!(
            "warmup fraction {warmup_fraction} outside [0, 1)"
        )));
    }
    let warmup = (warmup_fraction * total_steps as f64).floor() as usize;
    let floor_frac = 1e-3;
    if step < warmup {
        let t = step as f64 / warmup as f64;
        return Ok(base_lr * (floor_frac + (1.0 - floor_frac) * t));
    }
    let span = (total_steps - 1).saturating_sub(warmup).max(1);
    let t = (step - warmup) as f64 / span as f64;
    Ok(base_lr * 0.5 * (1.0 + (std::f64::consts::PI * t).cos()))
}

/// Distillation-weight schedule over training progress.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LambdaSchedule {
    Fixed { value: f64 },
    Anneal {
        start: f64,
        mid: f64,
        end: f64,
        p1: f64,
        p2: f64,
    },
}

impl LambdaSchedule {
    pub fn fixed(value: f64) -> Self {
        Self::Fixed { value }
    }

    /// Annealed schedule with the standard breakpoints. The mid plateau is
    /// half the start, except the 10-to-0 configuration which mids at 1.
    pub fn anneal(start: f64, end: f64) -> Self {
        let mid = if start == 10.0 && end == 0.0 { 1.0 } else { start / 2.0 };
        Self::Anneal { start, mid, end, p1: 0.4, p2: 0.7 }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Self::Fixed { value } if *value >= 0.0 => Ok(()),
            Self::Fixed { value } => Err(ModelError::InvalidParameter(format!(
                "fixed lambda must be nonnegative, got {value}"
            ))),
            Self::Anneal { start, mid, end, p1, p2 } => {
                if *start < 0.0 || *mid < 0.0 || *end < 0.0 {
                    return Err(ModelError::InvalidParameter(
                        "lambda values must be nonnegative".into(),
                    ));
                }
                if !(0.0 < *p1 && *p1 < *p2 && *p2 < 1.0) {
                    return Err(ModelError::InvalidParameter(format!(
                        "need 0 < p1 < p2 < 1, got {p1}, {p2}"
                    )));
                }
                Ok(())
            }
        }
    }
}

/// Distillation weight at progress `p` in [0, 1]: constant until p1, cosine
/// from start to mid until p2, cosine from mid to end until 1.
pub fn lambda_kd(p: f64, sched: &LambdaSchedule) -> Result<f64> {
    if !(0.0..=1.0).contains(&p) {
        return Err(ModelError::InvalidParameter(format!(
            "progress {p} outside [0, 1]"
        )));
    }
    sched.validate()?;
    match *sched {
        LambdaSchedule::Fixed { value } => Ok(value),
        LambdaSchedule::Anneal { start, mid, end, p1, p2 } => {
            if p <= p1 {
                Ok(start)
            } else if p <= p2 {
                let t1 = (p - p1) / (p2 - p1);
                Ok(mid + (start - mid) / 2.0 * (1.0 + (std::f64::consts::PI * t1).cos()))
            } else {
                let t2 = (p - p2) / (1.0 - p2);
                Ok(end + (mid - end) / 2.0 * (1.0 + (std::f64::consts::PI * t2).cos()))
            }
        }
    }
}
