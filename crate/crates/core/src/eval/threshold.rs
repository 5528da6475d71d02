use serde::{Deserialize, Serialize};

use super::metrics::Confusion;
use super::EvalError;
use crate::volume::Volume;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdCriterion {
    /// Maximize mean Dice over the set.
    MetricMax,
    /// Maximize pooled Youden's J.
    Roc,
}

/// Candidate thresholds `step, 2·step, …` strictly below 1.
pub fn threshold_grid(step: f64) -> Result<Vec<f64>, EvalError> {
    if !(step > 0.0 && step < 1.0) {
        return Err(EvalError::InvalidParam(format!("threshold step {step} must be in (0,1)")));
    }
    let mut grid = Vec::new();
    let mut k = 1u32;
    loop {
        let t = k as f64 * step;
        if t >= 1.0 - 1e-9 {
            break;
        }
        grid.push(t);
        k += 1;
    }
    if grid.is_empty() {
        grid.push(step);
    }
    Ok(grid)
}

fn confusion_at(soft: &Volume, gt: &Volume, t: f64) -> Confusion {
    let mut c = Confusion::default();
    for (p, g) in soft.data.iter().zip(gt.data.iter()) {
        match (*p as f64 >= t, *g >= 0.5) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    c
}

/// Grid search over [`threshold_grid`]; ties go to the smallest threshold.
pub fn optimal_threshold(soft: &[Volume], gts: &[Volume], step: f64, criterion: ThresholdCriterion) -> Result<f64, EvalError> {
    if soft.is_empty() || soft.len() != gts.len() {
        return Err(EvalError::InvalidParam(format!("need matching non-empty inputs, got {} predictions and {} labels", soft.len(), gts.len())));
    }
    for (s, g) in soft.iter().zip(gts) {
        if s.data.shape() != g.data.shape() {
            return Err(EvalError::Geometry(format!("{:?} vs {:?}", s.data.shape(), g.data.shape())));
        }
    }
    let mut best: Option<(f64, f64)> = None;
    for t in threshold_grid(step)? {
        let score = match criterion {
            ThresholdCriterion::MetricMax => soft.iter().zip(gts).map(|(s, g)| confusion_at(s, g, t).dice()).sum::<f64>() / soft.len() as f64,
            ThresholdCriterion::Roc => {
                let mut total = Confusion::default();
                for (s, g) in soft.iter().zip(gts) {
                    let c = confusion_at(s, g, t);
                    total.tp += c.tp;
                    total.fp += c.fp;
                    total.fn_ += c.fn_;
                    total.tn += c.tn;
                }
                let (tpr, fpr) = total.tpr_fpr();
                tpr - fpr
            }
        };
        if best.is_none_or(|(_, b)| score > b) {
            best = Some((t, score));
        }
    }
    Ok(best.unwrap().0)
}
