//! Browser demo: a synthetic slice, soft ground-truth dilation, random
//! augmentation and loss curves, exposed through wasm-bindgen.

use ndarray::{Array4, Axis};
use wasm_bindgen::prelude::*;

use segkit::losses::{compute_loss, LossName, LossParams, LossSpec};
use segkit::synth::{synth_subject, SynthSpec};
use segkit::transforms::{affine_augment, dilate_ground_truth, elastic_augment, Sample, Scope};

const SPACING: [f64; 3] = [1.0, 1.0, 1.0];

fn flat(a: &Array4<f32>) -> Vec<f32> {
    a.iter().copied().collect()
}

#[wasm_bindgen]
pub struct Slice {
    size: usize,
    image: Array4<f32>,
    label: Array4<f32>,
}

#[wasm_bindgen]
impl Slice {
    /// A `size`×`size` synthetic slice with tubes and spheres.
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32, size: usize) -> Slice {
        let size = size.clamp(16, 256);
        let spec = SynthSpec {
            subjects: 1,
            shape: [size, size, 1],
            spacing: SPACING,
            seed: seed as u64,
            ..SynthSpec::default()
        };
        let s = synth_subject(&spec, 0);
        Slice {
            size,
            image: s.images[0].data.clone(),
            label: s.label.data,
        }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    /// Row-major `size`×`size` intensities.
    pub fn image(&self) -> Vec<f32> {
        flat(&self.image)
    }

    pub fn label(&self) -> Vec<f32> {
        flat(&self.label)
    }

    /// Soft label after dilation by `mm` millimetres.
    pub fn dilate(&self, mm: f64) -> Result<Vec<f32>, JsError> {
        Ok(flat(&dilate_ground_truth(&self.label, SPACING, mm.max(0.0))?))
    }

    /// Image followed by label after one random affine (and optional
    /// elastic) draw.
    pub fn augment(&self, seed: u32, rotation_deg: f64, scale: f64, translation_vox: f64, elastic_alpha: f64) -> Result<Vec<f32>, JsError> {
        let sample = Sample {
            image: self.image.clone(),
            label: Some(self.label.clone()),
            spacing: SPACING,
            affine: segkit::volume::IDENTITY_AFFINE,
        };
        let scale = scale.max(0.0);
        let (mut out, _) = affine_augment(
            &sample,
            [-rotation_deg.abs(), rotation_deg.abs()],
            [1.0 - scale, 1.0 + scale],
            [-translation_vox.abs(), translation_vox.abs()],
            seed as u64,
            Scope::Both,
        )?;
        if elastic_alpha > 0.0 {
            out = elastic_augment(&out, elastic_alpha, 4.0, seed as u64 ^ 0x9e37, Scope::Both)?.0;
        }
        let label = out.label.unwrap_or_else(|| Array4::zeros(self.label.raw_dim()));
        let both = ndarray::concatenate(Axis(0), &[out.image.view(), label.view()])?;
        Ok(flat(&both))
    }
}

fn loss_name(name: &str) -> Result<LossName, String> {
    Ok(match name {
        "dice" => LossName::Dice,
        "cross_entropy" => LossName::CrossEntropy,
        "focal" => LossName::Focal,
        "focal_dice" => LossName::FocalDice,
        "adaptive_wing" => LossName::AdaptiveWing,
        "l2" => LossName::L2,
        other => return Err(format!("unknown loss `{other}`")),
    })
}

/// Loss of a uniform prediction `p` against a uniform target, for `points`
/// values of `p` evenly spaced over [0, 1].
pub fn curve(name: &str, target: f64, points: usize) -> Result<Vec<f64>, String> {
    let spec = LossSpec {
        name: loss_name(name)?,
        params: LossParams::default(),
    };
    let n = 16;
    let t = vec![target.clamp(0.0, 1.0); n];
    (0..points.max(2))
        .map(|i| {
            let p = i as f64 / (points.max(2) - 1) as f64;
            compute_loss(&spec, &vec![p; n], &t, n).map(|o| o.value).map_err(|e| e.to_string())
        })
        .collect()
}

#[wasm_bindgen]
pub fn loss_curve(name: &str, target: f64, points: usize) -> Result<Vec<f64>, JsError> {
    curve(name, target, points).map_err(|e| JsError::new(&e))
}
