//! Training objectives with analytic gradients, and mixup.
//!
//! Losses take flat `(N, C, voxels)` arrays in `f64`. Each returns the loss
//! value and its gradient with respect to `pred`.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::Tensor;

pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("pred has {pred} values but target has {target}")]
    ShapeMismatch { pred: usize, target: usize },
    #[error("{which} value {value} at index {index} is outside [0, 1]")]
    OutOfRange { which: &'static str, index: usize, value: f64 },
    #[error("invalid loss parameter: {0}")]
    InvalidParam(String),
    #[error("mixup needs at least 2 samples, got {0}")]
    BatchTooSmall(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossName {
    Dice,
    CrossEntropy,
    Focal,
    FocalDice,
    AdaptiveWing,
    L2,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossParams {
    pub eps: f64,
    pub gamma_focal: f64,
    pub alpha_focal: f64,
    pub lambda_mix: f64,
    pub omega: f64,
    pub theta: f64,
    pub eps_aw: f64,
    pub alpha_aw: f64,
}

impl Default for LossParams {
    fn default() -> Self {
        Self {
            eps: 1.0,
            gamma_focal: 2.0,
            alpha_focal: 0.25,
            lambda_mix: 0.5,
            omega: 14.0,
            theta: 0.5,
            eps_aw: 1.0,
            alpha_aw: 2.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossSpec {
    pub name: LossName,
    #[serde(default)]
    pub params: LossParams,
}

impl Default for LossSpec {
    fn default() -> Self {
        Self {
            name: LossName::Dice,
            params: LossParams::default(),
        }
    }
}

impl LossSpec {
    pub fn validate(&self) -> Result<(), LossError> {
        let p = &self.params;
        let all = [p.eps, p.gamma_focal, p.alpha_focal, p.lambda_mix, p.omega, p.theta, p.eps_aw, p.alpha_aw];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(LossError::InvalidParam("all parameters must be finite".into()));
        }
        if p.eps <= 0.0 {
            return Err(LossError::InvalidParam(format!("eps must be > 0, got {}", p.eps)));
        }
        if p.gamma_focal < 0.0 {
            return Err(LossError::InvalidParam(format!("gamma_focal must be >= 0, got {}", p.gamma_focal)));
        }
        if !(0.0..=1.0).contains(&p.alpha_focal) {
            return Err(LossError::InvalidParam(format!("alpha_focal must be in [0, 1], got {}", p.alpha_focal)));
        }
        if !(0.0..=1.0).contains(&p.lambda_mix) {
            return Err(LossError::InvalidParam(format!("lambda_mix must be in [0, 1], got {}", p.lambda_mix)));
        }
        if p.theta <= 0.0 || p.eps_aw <= 0.0 {
            return Err(LossError::InvalidParam("theta and eps_aw must be > 0".into()));
        }
        Ok(())
    }
}

/// Loss value and gradient with respect to `pred`.
#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub value: f64,
    pub grad: Vec<f64>,
}

fn check_shapes(pred: &[f64], target: &[f64]) -> Result<(), LossError> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(LossError::ShapeMismatch {
            pred: pred.len(),
            target: target.len(),
        });
    }
    Ok(())
}

fn check_unit(which: &'static str, v: &[f64]) -> Result<(), LossError> {
    match v.iter().position(|x| !(0.0..=1.0).contains(x)) {
        Some(index) => Err(LossError::OutOfRange { which, index, value: v[index] }),
        None => Ok(()),
    }
}

fn clamp(p: f64) -> (f64, f64) {
    // second value is d(clamped)/dp
    if p < PROB_CLAMP {
        (PROB_CLAMP, 0.0)
    } else if p > 1.0 - PROB_CLAMP {
        (1.0 - PROB_CLAMP, 0.0)
    } else {
        (p, 1.0)
    }
}

/// Soft Dice loss per `(sample, channel)` group of `group` voxels, averaged
/// over groups.
pub fn dice_loss(pred: &[f64], target: &[f64], group: usize, eps: f64) -> Result<LossOutput, LossError> {
    check_shapes(pred, target)?;
    check_unit("pred", pred)?;
    check_unit("target", target)?;
    if group == 0 || pred.len() % group != 0 {
        return Err(LossError::InvalidParam(format!("group size {group} does not divide {}", pred.len())));
    }
    let groups = pred.len() / group;
    let mut value = 0.0;
    let mut grad = vec![0.0; pred.len()];
    for g in 0..groups {
        let (p, t) = (&pred[g * group..(g + 1) * group], &target[g * group..(g + 1) * group]);
        let inter: f64 = p.iter().zip(t).map(|(a, b)| a * b).sum();
        let sum: f64 = p.iter().sum::<f64>() + t.iter().sum::<f64>();
        let num = 2.0 * inter + eps;
        let den = sum + eps;
        value += 1.0 - num / den;
        for i in 0..group {
            grad[g * group + i] = -(2.0 * t[i] * den - num) / (den * den) / groups as f64;
        }
    }
    Ok(LossOutput {
        value: value / groups as f64,
        grad,
    })
}

pub fn cross_entropy_loss(pred: &[f64], target: &[f64]) -> Result<LossOutput, LossError> {
    check_shapes(pred, target)?;
    let n = pred.len() as f64;
    let mut value = 0.0;
    let grad = pred
        .iter()
        .zip(target)
        .map(|(p, t)| {
            let (p, dp) = clamp(*p);
            value -= t * p.ln() + (1.0 - t) * (1.0 - p).ln();
            dp * (-t / p + (1.0 - t) / (1.0 - p)) / n
        })
        .collect();
    Ok(LossOutput { value: value / n, grad })
}

pub fn focal_loss(pred: &[f64], target: &[f64], gamma: f64, alpha: f64) -> Result<LossOutput, LossError> {
    check_shapes(pred, target)?;
    let n = pred.len() as f64;
    let mut value = 0.0;
    let grad = pred
        .iter()
        .zip(target)
        .map(|(p, t)| {
            let (p, dp) = clamp(*p);
            let q = 1.0 - p;
            let pos = alpha * t;
            let neg = (1.0 - alpha) * (1.0 - t);
            value -= pos * q.powf(gamma) * p.ln() + neg * p.powf(gamma) * q.ln();
            let dpos = if gamma == 0.0 { 1.0 / p } else { -gamma * q.powf(gamma - 1.0) * p.ln() + q.powf(gamma) / p };
            let dneg = if gamma == 0.0 { -1.0 / q } else { gamma * p.powf(gamma - 1.0) * q.ln() - p.powf(gamma) / q };
            dp * -(pos * dpos + neg * dneg) / n
        })
        .collect();
    Ok(LossOutput { value: value / n, grad })
}

/// `λ·focal + (1 − λ)·dice`.
pub fn focal_dice_loss(pred: &[f64], target: &[f64], group: usize, gamma: f64, alpha: f64, lambda: f64, eps: f64) -> Result<LossOutput, LossError> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(LossError::InvalidParam(format!("lambda_mix must be in [0, 1], got {lambda}")));
    }
    let f = focal_loss(pred, target, gamma, alpha)?;
    let d = dice_loss(pred, target, group, eps)?;
    Ok(LossOutput {
        value: lambda * f.value + (1.0 - lambda) * d.value,
        grad: f.grad.iter().zip(&d.grad).map(|(a, b)| lambda * a + (1.0 - lambda) * b).collect(),
    })
}

/// Per-voxel adaptive wing value and derivative with respect to `d`.
pub fn adaptive_wing_point(d: f64, target: f64, omega: f64, theta: f64, eps: f64, alpha: f64) -> (f64, f64) {
    let e = alpha - target;
    if d < theta {
        let r = (d / eps).powf(e);
        let dr = if d == 0.0 { 0.0 } else { e * (d / eps).powf(e - 1.0) / eps };
        (omega * (1.0 + r).ln(), omega * dr / (1.0 + r))
    } else {
        let rt = (theta / eps).powf(e);
        let a = omega / (1.0 + rt) * e * (theta / eps).powf(e - 1.0) / eps;
        let c = theta * a - omega * (1.0 + rt).ln();
        (a * d - c, a)
    }
}

pub fn adaptive_wing_loss(pred: &[f64], target: &[f64], omega: f64, theta: f64, eps: f64, alpha: f64) -> Result<LossOutput, LossError> {
    check_shapes(pred, target)?;
    check_unit("target", target)?;
    if theta <= 0.0 || eps <= 0.0 {
        return Err(LossError::InvalidParam("theta and eps_aw must be > 0".into()));
    }
    let n = pred.len() as f64;
    let mut value = 0.0;
    let grad = pred
        .iter()
        .zip(target)
        .map(|(p, t)| {
            let diff = p - t;
            let (v, dv) = adaptive_wing_point(diff.abs(), *t, omega, theta, eps, alpha);
            value += v;
            dv * diff.signum() * if diff == 0.0 { 0.0 } else { 1.0 } / n
        })
        .collect();
    Ok(LossOutput { value: value / n, grad })
}

pub fn l2_loss(pred: &[f64], target: &[f64]) -> Result<LossOutput, LossError> {
    check_shapes(pred, target)?;
    let n = pred.len() as f64;
    let value = pred.iter().zip(target).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / n;
    let grad = pred.iter().zip(target).map(|(p, t)| 2.0 * (p - t) / n).collect();
    Ok(LossOutput { value, grad })
}

/// Dispatches on the spec. `group` is the voxel count of one
/// `(sample, channel)` slab.
pub fn compute_loss(spec: &LossSpec, pred: &[f64], target: &[f64], group: usize) -> Result<LossOutput, LossError> {
    let p = &spec.params;
    match spec.name {
        LossName::Dice => dice_loss(pred, target, group, p.eps),
        LossName::CrossEntropy => cross_entropy_loss(pred, target),
        LossName::Focal => focal_loss(pred, target, p.gamma_focal, p.alpha_focal),
        LossName::FocalDice => focal_dice_loss(pred, target, group, p.gamma_focal, p.alpha_focal, p.lambda_mix, p.eps),
        LossName::AdaptiveWing => adaptive_wing_loss(pred, target, p.omega, p.theta, p.eps_aw, p.alpha_aw),
        LossName::L2 => l2_loss(pred, target),
    }
}

/// Mixed batch: `x̃_i = λ_i x_i + (1 − λ_i) x_{perm_i}`, same for labels.
#[derive(Debug, Clone)]
pub struct Mixup {
    pub x: Tensor,
    pub y: Tensor,
    pub lambdas: Vec<f64>,
    pub partners: Vec<usize>,
}

/// Mixes with explicit partners and coefficients.
pub fn mixup_with(x: &Tensor, y: &Tensor, partners: &[usize], lambdas: &[f64]) -> Result<Mixup, LossError> {
    let n = x.n();
    if n < 2 {
        return Err(LossError::BatchTooSmall(n));
    }
    if y.n() != n || partners.len() != n || lambdas.len() != n {
        return Err(LossError::InvalidParam("mixup inputs disagree on batch size".into()));
    }
    let mix = |t: &Tensor| {
        let mut out = t.clone();
        for i in 0..n {
            let (l, j) = (lambdas[i] as f32, partners[i]);
            let other = t.sample(j).to_vec();
            for (o, (a, b)) in out.sample_mut(i).iter_mut().zip(t.sample(i).iter().zip(&other)) {
                *o = l * a + (1.0 - l) * b;
            }
        }
        out
    };
    Ok(Mixup {
        x: mix(x),
        y: mix(y),
        lambdas: lambdas.to_vec(),
        partners: partners.to_vec(),
    })
}

/// Draws a random pairing and `λ ~ Beta(β, β)` per sample.
pub fn mixup_batch<R: Rng>(x: &Tensor, y: &Tensor, beta: f64, rng: &mut R) -> Result<Mixup, LossError> {
    if x.n() < 2 {
        return Err(LossError::BatchTooSmall(x.n()));
    }
    let dist = Beta::new(beta, beta).map_err(|e| LossError::InvalidParam(format!("beta {beta}: {e}")))?;
    let mut partners: Vec<usize> = (0..x.n()).collect();
    partners.shuffle(rng);
    let lambdas: Vec<f64> = (0..x.n()).map(|_| dist.sample(rng)).collect();
    mixup_with(x, y, &partners, &lambdas)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn dice_examples() {
        let d = dice_loss(&[0.5; 4], &[1.0; 4], 4, 1e-12).unwrap();
        assert_abs_diff_eq!(d.value, 1.0 / 3.0, epsilon = 1e-9);
        let same = dice_loss(&[1.0, 0.0, 1.0], &[1.0, 0.0, 1.0], 3, 1e-9).unwrap();
        assert!(same.value < 1e-9);
        let disjoint = dice_loss(&[1.0, 0.0], &[0.0, 1.0], 2, 1e-9).unwrap();
        assert_abs_diff_eq!(disjoint.value, 1.0, epsilon = 1e-8);
        assert!(matches!(dice_loss(&[1.5], &[1.0], 1, 1.0), Err(LossError::OutOfRange { .. })));
        assert!(matches!(dice_loss(&[1.0], &[1.0, 0.0], 1, 1.0), Err(LossError::ShapeMismatch { .. })));
    }

    #[test]
    fn cross_entropy_and_focal_examples() {
        let ce = cross_entropy_loss(&[0.5; 8], &[1.0, 0.0, 1.0, 0.0, 1.0, 1.0, 0.0, 0.3]).unwrap();
        assert_abs_diff_eq!(ce.value, std::f64::consts::LN_2, epsilon = 1e-12);
        assert!(cross_entropy_loss(&[1.0], &[1.0]).unwrap().value < 1e-6);
        let (p, t) = ([0.2, 0.7, 0.9], [1.0, 0.0, 0.4]);
        let flipped = (p.map(|v| 1.0 - v), t.map(|v| 1.0 - v));
        assert_abs_diff_eq!(
            cross_entropy_loss(&p, &t).unwrap().value,
            cross_entropy_loss(&flipped.0, &flipped.1).unwrap().value,
            epsilon = 1e-12
        );
        let f = focal_loss(&p, &t, 0.0, 0.5).unwrap();
        assert_abs_diff_eq!(f.value, 0.5 * cross_entropy_loss(&p, &t).unwrap().value, epsilon = 1e-12);
        // confident correct prediction: focal far below CE
        let easy_f = focal_loss(&[0.99], &[1.0], 2.0, 0.5).unwrap().value;
        let easy_ce = cross_entropy_loss(&[0.99], &[1.0]).unwrap().value;
        assert!(easy_f < 1e-3 * easy_ce);
        let mut last = f64::INFINITY;
        for g in [0.0, 0.5, 1.0, 2.0, 4.0, 8.0] {
            let v = focal_loss(&[0.8], &[1.0], g, 0.5).unwrap().value;
            assert!(v < last);
            last = v;
        }
    }

    #[test]
    fn focal_dice_endpoints() {
        let (p, t) = ([0.2, 0.7, 0.9, 0.1], [1.0, 0.0, 1.0, 0.0]);
        let d = dice_loss(&p, &t, 4, 1.0).unwrap().value;
        let f = focal_loss(&p, &t, 2.0, 0.25).unwrap().value;
        assert_eq!(focal_dice_loss(&p, &t, 4, 2.0, 0.25, 0.0, 1.0).unwrap().value, d);
        assert_eq!(focal_dice_loss(&p, &t, 4, 2.0, 0.25, 1.0, 1.0).unwrap().value, f);
        assert!(focal_dice_loss(&p, &t, 4, 2.0, 0.25, 1.5, 1.0).is_err());
        let perfect = focal_dice_loss(&[1.0, 0.0], &[1.0, 0.0], 2, 2.0, 0.25, 0.5, 1e-9).unwrap().value;
        assert!(perfect < 1e-6);
    }

    #[test]
    fn adaptive_wing_reference_value() {
        let v = adaptive_wing_loss(&[0.25], &[0.0], 14.0, 0.5, 1.0, 2.1).unwrap().value;
        let want = 14.0 * (1.0f64 + 0.25f64.powf(2.1)).ln();
        assert_abs_diff_eq!(v, want, epsilon = 1e-12);
        assert_abs_diff_eq!(v, 0.742, epsilon = 5e-4);
        assert_eq!(adaptive_wing_loss(&[0.3], &[0.3], 14.0, 0.5, 1.0, 2.1).unwrap().value, 0.0);
        assert!(adaptive_wing_loss(&[0.3], &[0.3], 14.0, 0.0, 1.0, 2.1).is_err());
    }

    #[test]
    fn l2_examples() {
        assert_eq!(l2_loss(&[3.0, 2.0], &[1.0, 0.0]).unwrap().value, 4.0);
        assert_eq!(l2_loss(&[0.5], &[0.5]).unwrap().value, 0.0);
    }

    #[test]
    fn mixup_examples() {
        let x = Tensor::from_vec([2, 1, 1, 1, 2], vec![0.0, 0.0, 2.0, 2.0]);
        let y = Tensor::from_vec([2, 1, 1, 1, 2], vec![1.0, 0.0, 0.0, 1.0]);
        let same = mixup_with(&x, &y, &[1, 0], &[1.0, 1.0]).unwrap();
        assert_eq!(same.x, x);
        assert_eq!(same.y, y);
        let half = mixup_with(&x, &y, &[1, 0], &[0.5, 0.5]).unwrap();
        assert_eq!(half.x.data, vec![1.0; 4]);
        assert!(half.y.data.iter().all(|v| (0.0..=1.0).contains(v)));
        let one = Tensor::zeros([1, 1, 1, 1, 1]);
        assert_eq!(mixup_with(&one, &one, &[0], &[0.5]).unwrap_err(), LossError::BatchTooSmall(1));
    }
}
