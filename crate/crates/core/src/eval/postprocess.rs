use ndarray::{Array3, Array4, Axis};
use serde::{Deserialize, Serialize};

use super::components::label_components;
use super::EvalError;
use crate::volume::Volume;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "step", rename_all = "snake_case", deny_unknown_fields)]
pub enum PostStep {
    Threshold { value: f64 },
    FillHoles,
    RemoveSmall { min_mm3: f64 },
    KeepLargest,
    /// Drops voxels whose uncertainty exceeds `max`.
    UncertaintyThreshold { max: f64 },
}

impl PostStep {
    pub fn validate(&self) -> Result<(), EvalError> {
        match self {
            PostStep::Threshold { value } if !(0.0..=1.0).contains(value) => Err(EvalError::InvalidParam(format!("threshold {value} outside [0,1]"))),
            PostStep::RemoveSmall { min_mm3 } if !min_mm3.is_finite() || *min_mm3 < 0.0 => {
                Err(EvalError::InvalidParam(format!("remove_small min_mm3 {min_mm3} must be >= 0")))
            }
            PostStep::UncertaintyThreshold { max } if !max.is_finite() || *max < 0.0 => {
                Err(EvalError::InvalidParam(format!("uncertainty_threshold max {max} must be >= 0")))
            }
            _ => Ok(()),
        }
    }
}

/// Fills background regions not connected to the grid border. Singleton
/// axes do not count as border.
pub fn fill_holes(mask: &Array3<bool>) -> Array3<bool> {
    let bg = mask.mapv(|m| !m);
    let (labels, sizes) = label_components(bg.view());
    let (nx, ny, nz) = mask.dim();
    let dims = [nx, ny, nz];
    let mut outside = vec![false; sizes.len()];
    for ((i, j, k), l) in labels.indexed_iter() {
        if *l == 0 {
            continue;
        }
        let p = [i, j, k];
        let on_border = (0..3).any(|a| dims[a] > 1 && (p[a] == 0 || p[a] == dims[a] - 1));
        if on_border {
            outside[*l as usize - 1] = true;
        }
    }
    Array3::from_shape_fn(mask.dim(), |ix| mask[ix] || (labels[ix] > 0 && !outside[labels[ix] as usize - 1]))
}

fn remove_small(mask: &Array3<bool>, min_mm3: f64, voxel_mm3: f64) -> Array3<bool> {
    let (labels, sizes) = label_components(mask.view());
    labels.mapv(|l| l > 0 && sizes[l as usize - 1] as f64 * voxel_mm3 >= min_mm3)
}

fn keep_largest(mask: &Array3<bool>) -> Array3<bool> {
    let (labels, sizes) = label_components(mask.view());
    let Some(best) = (0..sizes.len()).reduce(|a, b| if sizes[b] > sizes[a] { b } else { a }) else {
        return mask.clone();
    };
    labels.mapv(|l| l == best as u32 + 1)
}

/// Applies `steps` in order and returns a binary volume. Steps other than
/// `threshold` see the input binarized at 0.5 if no threshold ran yet.
pub fn postprocess(input: &Volume, steps: &[PostStep], uncertainty: Option<&Volume>) -> Result<Volume, EvalError> {
    for s in steps {
        s.validate()?;
    }
    let vox = input.spacing.iter().product::<f64>();
    let mut out = Array4::<f32>::zeros(input.data.raw_dim());
    for c in 0..input.channels() {
        let soft = input.data.index_axis(Axis(0), c);
        let mut mask: Option<Array3<bool>> = None;
        for step in steps {
            let current = || mask.clone().unwrap_or_else(|| soft.map(|v| *v >= 0.5));
            mask = Some(match step {
                PostStep::Threshold { value } => match &mask {
                    None => soft.map(|v| *v as f64 >= *value),
                    Some(m) => m.clone(),
                },
                PostStep::FillHoles => fill_holes(&current()),
                PostStep::RemoveSmall { min_mm3 } => remove_small(&current(), *min_mm3, vox),
                PostStep::KeepLargest => keep_largest(&current()),
                PostStep::UncertaintyThreshold { max } => {
                    let unc = uncertainty.ok_or_else(|| EvalError::InvalidParam("uncertainty_threshold needs an uncertainty map".into()))?;
                    if unc.shape3() != input.shape3() {
                        return Err(EvalError::Geometry("uncertainty map grid differs from prediction".into()));
                    }
                    let u = unc.data.index_axis(Axis(0), c.min(unc.channels() - 1));
                    let mut m = current();
                    for (v, uv) in m.iter_mut().zip(u.iter()) {
                        if *uv as f64 > *max {
                            *v = false;
                        }
                    }
                    m
                }
            });
        }
        let m = mask.unwrap_or_else(|| soft.map(|v| *v >= 0.5));
        out.index_axis_mut(Axis(0), c).zip_mut_with(&m, |o, v| *o = if *v { 1.0 } else { 0.0 });
    }
    Ok(input.with_data(out)?)
}
