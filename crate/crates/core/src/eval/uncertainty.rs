use std::str::FromStr;

use ndarray::{Array4, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::components::label_components;
use super::inference::{predict_native, tta_eligible, InferenceSettings};
use super::EvalError;
use crate::models::Model;
use crate::transforms::derive_seed;
use crate::volume::Volume;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UncertaintyMode {
    Epistemic,
    Aleatoric,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PredictionSource {
    Epistemic,
    Aleatoric,
    Single,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UncertaintyMeasure {
    Entropy,
    Variance,
    Cv,
}

impl UncertaintyMeasure {
    pub fn name(self) -> &'static str {
        match self {
            UncertaintyMeasure::Entropy => "entropy",
            UncertaintyMeasure::Variance => "variance",
            UncertaintyMeasure::Cv => "cv",
        }
    }
}

impl FromStr for UncertaintyMeasure {
    type Err = EvalError;

    fn from_str(s: &str) -> Result<Self, EvalError> {
        match s {
            "entropy" => Ok(UncertaintyMeasure::Entropy),
            "variance" => Ok(UncertaintyMeasure::Variance),
            "cv" => Ok(UncertaintyMeasure::Cv),
            other => Err(EvalError::InvalidParam(format!("unknown uncertainty measure `{other}` (entropy, variance, cv)"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct PredictionSet {
    pub volume_id: String,
    pub maps: Vec<Volume>,
    pub mean: Volume,
    pub source: PredictionSource,
}

impl PredictionSet {
    pub fn from_maps(volume_id: &str, maps: Vec<Volume>, source: PredictionSource) -> Result<Self, EvalError> {
        let first = maps.first().ok_or_else(|| EvalError::InvalidParam("empty prediction set".into()))?;
        if maps.iter().any(|m| m.data.shape() != first.data.shape() || m.affine != first.affine || m.spacing != first.spacing) {
            return Err(EvalError::Geometry("prediction maps do not share a geometry".into()));
        }
        let mut acc = Array4::<f64>::zeros(first.data.raw_dim());
        for m in &maps {
            acc.zip_mut_with(&m.data, |a, v| *a += *v as f64);
        }
        let n = maps.len() as f64;
        let mean = first.with_data(acc.mapv(|a| (a / n) as f32))?;
        Ok(PredictionSet {
            volume_id: volume_id.to_string(),
            maps,
            mean,
            source,
        })
    }
}

/// Test hook options for [`sample_predictions`].
#[derive(Debug, Clone, Copy, Default)]
pub struct SamplingOverrides {
    /// Run epistemic sampling with dropout switched off.
    pub disable_dropout: bool,
}

/// `n` stochastic predictions: dropout active at inference (epistemic) or
/// random invertible augmentations mapped back (aleatoric).
pub fn sample_predictions(
    model: &mut Model,
    volume: &Volume,
    mode: UncertaintyMode,
    n: usize,
    settings: &InferenceSettings,
    seed: u64,
    overrides: SamplingOverrides,
) -> Result<PredictionSet, EvalError> {
    if n < 2 {
        return Err(EvalError::InvalidParam(format!("need at least 2 inference samples, got {n}")));
    }
    let mut maps = Vec::with_capacity(n);
    match mode {
        UncertaintyMode::Epistemic => {
            if model.spec().dropout_rate <= 0.0 && !overrides.disable_dropout {
                return Err(EvalError::InvalidParam("epistemic sampling needs dropout_rate > 0".into()));
            }
            for i in 0..n {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "epistemic", i));
                maps.push(predict_native(model, volume, settings, !overrides.disable_dropout, None, &mut rng)?);
            }
        }
        UncertaintyMode::Aleatoric => {
            if settings.tta.is_empty() || !settings.tta.iter().all(tta_eligible) {
                return Err(EvalError::InvalidParam("aleatoric sampling needs at least one invertible augmentation and no others".into()));
            }
            for i in 0..n {
                let mut rng = ChaCha8Rng::seed_from_u64(0);
                maps.push(predict_native(model, volume, settings, false, Some(derive_seed(seed, "aleatoric", i)), &mut rng)?);
            }
        }
    }
    let source = if overrides.disable_dropout && mode == UncertaintyMode::Epistemic {
        PredictionSource::Single
    } else if mode == UncertaintyMode::Epistemic {
        PredictionSource::Epistemic
    } else {
        PredictionSource::Aleatoric
    };
    PredictionSet::from_maps("", maps, source)
}

fn binary_entropy(p: f64) -> f64 {
    let term = |q: f64| if q <= 0.0 { 0.0 } else { -q * q.ln() };
    term(p) + term(1.0 - p)
}

/// Per-voxel uncertainty across the set. Entropy is the binary entropy of
/// the mean map minus the mean per-sample entropy, so it equals the plain
/// entropy of the mean for binary samples and vanishes when all samples
/// agree; variance is the population variance and cv is std/(mean + 1e-8).
pub fn voxel_uncertainty(pset: &PredictionSet, measure: UncertaintyMeasure) -> Result<Volume, EvalError> {
    if pset.maps.len() < 2 {
        return Err(EvalError::InvalidParam("need at least 2 maps".into()));
    }
    let n = pset.maps.len() as f64;
    let mut out = Array4::<f32>::zeros(pset.mean.data.raw_dim());
    let flat: Vec<&[f32]> = pset.maps.iter().map(|m| m.data.as_slice().expect("standard layout")).collect();
    for (idx, o) in out.as_slice_mut().unwrap().iter_mut().enumerate() {
        let first = flat[0][idx];
        if flat.iter().all(|m| m[idx] == first) {
            continue;
        }
        let vals = flat.iter().map(|m| (m[idx] as f64).clamp(0.0, 1.0));
        let mean = vals.clone().sum::<f64>() / n;
        *o = match measure {
            UncertaintyMeasure::Entropy => {
                let expected = vals.map(binary_entropy).sum::<f64>() / n;
                (binary_entropy(mean) - expected).max(0.0)
            }
            UncertaintyMeasure::Variance => vals.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n,
            UncertaintyMeasure::Cv => (vals.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt() / (mean + 1e-8),
        } as f32;
    }
    Ok(pset.mean.with_data(out)?)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ObjectScore {
    pub class_index: usize,
    pub object_id: u32,
    pub score: f64,
    pub voxels: usize,
    pub volume_mm3: f64,
}

/// Scores each connected component of `binary` by the mean voxel
/// uncertainty over its support.
pub fn object_uncertainty(pset: &PredictionSet, binary: &Volume, measure: UncertaintyMeasure) -> Result<Vec<ObjectScore>, EvalError> {
    let unc = voxel_uncertainty(pset, measure)?;
    if binary.shape3() != unc.shape3() {
        return Err(EvalError::Geometry("binary prediction grid differs from uncertainty map".into()));
    }
    object_scores(&unc, binary)
}

pub fn object_scores(unc: &Volume, binary: &Volume) -> Result<Vec<ObjectScore>, EvalError> {
    let vox = binary.spacing.iter().product::<f64>();
    let mut out = Vec::new();
    for c in 0..binary.channels() {
        let mask = binary.data.index_axis(Axis(0), c).map(|v| *v >= 0.5);
        let u = unc.data.index_axis(Axis(0), c.min(unc.channels() - 1));
        let (labels, sizes) = label_components(mask.view());
        let mut sums = vec![0f64; sizes.len()];
        for (l, v) in labels.iter().zip(u.iter()) {
            if *l > 0 {
                sums[*l as usize - 1] += *v as f64;
            }
        }
        for (i, (s, n)) in sums.iter().zip(&sizes).enumerate() {
            out.push(ObjectScore {
                class_index: c,
                object_id: i as u32 + 1,
                score: s / *n as f64,
                voxels: *n,
                volume_mm3: *n as f64 * vox,
            });
        }
    }
    Ok(out)
}
