//! Exponential-moving-average teacher: an exact copy of the student during
//! warmup, then a slow-moving parameter average.

use crate::error::{ModelError, Result};
use crate::nn::ParamStore;

/// Teacher parameter snapshot with its averaging policy.
#[derive(Debug, Clone)]
pub struct EMAState {
    /// Teacher parameters, same names and shapes as the student.
    pub teacher: ParamStore,
    /// Averaging decay once warmup has elapsed.
    pub decay: f64,
    /// Steps during which the teacher exactly tracks the student.
    pub warmup_steps: usize,
    /// Update counter.
    pub step: usize,
}

impl EMAState {
    /// Initializes the teacher as a copy of the student.
    pub fn new(student: &ParamStore, decay: f64, warmup_steps: usize) -> Result<Self> {
        if !(0.0 < decay && decay < 1.0) {
            return Err(ModelError::InvalidParameter(format!(
                "EMA decay must lie in (0, 1), got {decay}"
            )));
        }
        Ok(Self { teacher: student.clone(), decay, warmup_steps, step: 0 })
    }
}

/// Advances the teacher for optimizer step `step`: an exact copy while
/// `step < warmup_steps`, afterwards `teacher = decay * teacher +
/// (1 - decay) * student` elementwise.
pub fn ema_update(ema: &mut EMAState, student: &ParamStore, step: usize) -> Result<()> {
    if ema.teacher.len() != student.len() {
        return Err(ModelError::InvalidInput(
            "teacher/student parameter sets differ".into(),
        ));
    }
    for (name, s) in student.iter() {
        if !ema.teacher.contains(name) || ema.teacher.get(name).dim() != s.dim() {
            return Err(ModelError::InvalidInput(format!(
                "teacher/student shape mismatch at {name}"
            )));
        }
    }
    if step < ema.warmup_steps {
        for (name, s) in student.iter() {
            ema.teacher.get_mut(name).assign(s);
        }
    } else {
        let d = ema.decay;
        for (name, s) in student.iter() {
            ema.teacher
                .get_mut(name)
                .zip_mut_with(s, |t, si| *t = d * *t + (1.0 - d) * si);
        }
    }
    ema.step = step + 1;
    Ok(())
}
