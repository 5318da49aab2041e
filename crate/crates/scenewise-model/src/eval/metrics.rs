//! Report types and ranking / mask metrics shared by the evaluation tasks.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{ModelError, Result};

/// Aggregated metrics for one evaluation task, serialized to
/// `reports/{task}.json`. Ranking tasks fill the top-k fields, mask tasks
/// the dice/iou/mae fields; the rest stay `None`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub task: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub top1: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub top5: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub top10: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dice: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub iou: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mae: Option<f64>,
    pub n_items: usize,
    #[serde(default)]
    pub warnings: Vec<String>,
    #[serde(default)]
    pub config: serde_json::Value,
}

impl MetricsReport {
    /// Empty report skeleton for a task.
    pub fn new(task: &str) -> Self {
        MetricsReport {
            task: task.to_string(),
            top1: None,
            top5: None,
            top10: None,
            dice: None,
            iou: None,
            mae: None,
            n_items: 0,
            warnings: Vec::new(),
            config: serde_json::Value::Null,
        }
    }

    /// Checks metric ranges and the top-k monotonicity chain.
    pub fn validate(&self) -> Result<()> {
        let err = |msg: String| Err(ModelError::InvalidConfig(msg));
        if self.task.is_empty() {
            return err("report task name must be non-empty".into());
        }
        for (name, v) in [
            ("top1", self.top1),
            ("top5", self.top5),
            ("top10", self.top10),
            ("dice", self.dice),
            ("iou", self.iou),
        ] {
            if let Some(x) = v {
                if !(0.0..=1.0).contains(&x) || !x.is_finite() {
                    return err(format!("{name} must lie in [0, 1], got {x}"));
                }
            }
        }
        if let Some(m) = self.mae {
            if !(m >= 0.0) || !m.is_finite() {
                return err(format!("mae must be non-negative, got {m}"));
            }
        }
        let chain: Vec<f64> = [self.top1, self.top5, self.top10].into_iter().flatten().collect();
        if chain.windows(2).any(|w| w[0] > w[1]) {
            return err(format!("top-k accuracies must be non-decreasing, got {chain:?}"));
        }
        Ok(())
    }

    /// Validates and writes the report as pretty JSON to
    /// `{reports_dir}/{task}.json`, creating the directory if needed.
    pub fn write(&self, reports_dir: &Path) -> Result<PathBuf> {
        self.validate()?;
        fs::create_dir_all(reports_dir)
            .map_err(|e| ModelError::io(reports_dir.display().to_string(), e))?;
        let path = reports_dir.join(format!("{}.json", self.task));
        let mut body = serde_json::to_string_pretty(self)
            .map_err(|e| ModelError::Serde { path: path.clone(), source: e })?;
        body.push('\n');
        fs::write(&path, body).map_err(|e| ModelError::io(path.display().to_string(), e))?;
        Ok(path)
    }
}

/// Rank of the truth column within a score row: the number of strictly
/// higher scores plus the number of equal scores at a lower class index.
/// Rank 0 means the truth is retrieved first.
pub fn rank_of(scores: ArrayView1<f64>, truth: usize) -> usize {
    let target = scores[truth];
    scores
        .iter()
        .enumerate()
        .filter(|&(j, &s)| s > target || (s == target && j < truth))
        .count()
}

/// Fraction of rows whose truth index ranks within the top `k` scores.
/// Ties break by ascending class index.
pub fn topk_accuracy(scores: &Array2<f64>, truths: &[usize], k: usize) -> Result<f64> {
    let (n, c) = scores.dim();
    if k == 0 || k > c {
        return Err(ModelError::InvalidParameter(format!(
            "k must lie in 1..={c}, got {k}"
        )));
    }
    if truths.len() != n {
        return Err(ModelError::InvalidInput(format!(
            "expected {n} truth labels, got {}",
            truths.len()
        )));
    }
    if n == 0 {
        return Err(ModelError::InvalidInput("score matrix has no rows".into()));
    }
    let mut hits = 0usize;
    for (row, &t) in scores.outer_iter().zip(truths) {
        if t >= c {
            return Err(ModelError::InvalidInput(format!(
                "truth index {t} out of range for {c} classes"
            )));
        }
        if rank_of(row, t) < k {
            hits += 1;
        }
    }
    Ok(hits as f64 / n as f64)
}

/// Fills the top-1/5/10 fields from a score matrix, clamping each cutoff to
/// the class count so small candidate sets still report.
pub fn fill_topk(report: &mut MetricsReport, scores: &Array2<f64>, truths: &[usize]) -> Result<()> {
    let c = scores.ncols();
    report.top1 = Some(topk_accuracy(scores, truths, 1.min(c))?);
    report.top5 = Some(topk_accuracy(scores, truths, 5.min(c))?);
    report.top10 = Some(topk_accuracy(scores, truths, 10.min(c))?);
    Ok(())
}

/// Dice and IoU between two masks binarized at `threshold`. Two empty
/// masks count as a perfect match.
pub fn binary_dice_iou(pred: &Array2<f64>, truth: &Array2<f64>, threshold: f64) -> Result<(f64, f64)> {
    if pred.dim() != truth.dim() {
        return Err(ModelError::InvalidInput(format!(
            "mask shapes differ: {:?} vs {:?}",
            pred.dim(),
            truth.dim()
        )));
    }
    let mut inter = 0usize;
    let mut p_area = 0usize;
    let mut t_area = 0usize;
    for (&p, &t) in pred.iter().zip(truth.iter()) {
        let p = p >= threshold;
        let t = t >= threshold;
        inter += (p && t) as usize;
        p_area += p as usize;
        t_area += t as usize;
    }
    let union = p_area + t_area - inter;
    if union == 0 {
        return Ok((1.0, 1.0));
    }
    let iou = inter as f64 / union as f64;
    let dice = 2.0 * inter as f64 / (p_area + t_area) as f64;
    Ok((dice, iou))
}

/// Mean absolute error between two real-valued masks.
pub fn mask_mae(pred: &Array2<f64>, truth: &Array2<f64>) -> Result<f64> {
    if pred.dim() != truth.dim() {
        return Err(ModelError::InvalidInput(format!(
            "mask shapes differ: {:?} vs {:?}",
            pred.dim(),
            truth.dim()
        )));
    }
    let n = pred.len();
    if n == 0 {
        return Err(ModelError::InvalidInput("masks are empty".into()));
    }
    let sum: f64 = pred.iter().zip(truth.iter()).map(|(&p, &t)| (p - t).abs()).sum();
    Ok(sum / n as f64)
}
