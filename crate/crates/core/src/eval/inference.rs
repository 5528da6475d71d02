use ndarray::Array4;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::EvalError;
use crate::meta::Metadata;
use crate::models::Model;
use crate::transforms::{apply_pipeline, derive_seed, invert_geometry, restore_native, Sample, TransformKind, TransformSpec};
use crate::volume::{extract_units, reconstruct_volume, UnitSpec, Volume};

/// Everything inference needs besides the model.
#[derive(Debug, Clone)]
pub struct InferenceSettings {
    pub units: UnitSpec,
    /// Deterministic preprocessing, the same as in training.
    pub preprocessing: Vec<TransformSpec>,
    /// Invertible augmentations drawn for test-time augmentation.
    pub tta: Vec<TransformSpec>,
    pub metadata: Metadata,
    /// Per-modality availability of the input; `None` means all present.
    pub availability: Option<Vec<bool>>,
}

impl InferenceSettings {
    pub fn new(units: UnitSpec) -> Self {
        InferenceSettings {
            units,
            preprocessing: Vec::new(),
            tta: Vec::new(),
            metadata: Metadata::new(),
            availability: None,
        }
    }
}

/// Transform kinds whose records can be inverted on a prediction map.
pub fn tta_eligible(spec: &TransformSpec) -> bool {
    matches!(spec.kind, TransformKind::AffineAugment { .. } | TransformKind::CropOrPad { .. })
}

/// Preprocesses, predicts (optionally under dropout or per-unit TTA) and
/// maps the result back onto the input grid.
pub(crate) fn predict_native(
    model: &mut Model,
    volume: &Volume,
    settings: &InferenceSettings,
    dropout: bool,
    tta_seed: Option<u64>,
    rng: &mut ChaCha8Rng,
) -> Result<Volume, EvalError> {
    let (pre, records) = apply_pipeline(&Sample::from_volume(volume, None), &settings.preprocessing, 0)?;
    let pre_vol = pre.image_volume()?;
    let soft = match tta_seed {
        None => model.predict_volume_with(&pre_vol, &settings.units, &settings.metadata, settings.availability.as_deref(), dropout, rng)?,
        Some(seed) => {
            let mut units = extract_units(&pre_vol, None, &settings.units, "tta", &settings.metadata)?;
            let n_mod = model.spec().n_modalities;
            let mut preds = Vec::with_capacity(units.len());
            let mut all_records = Vec::with_capacity(units.len());
            for (i, u) in units.iter_mut().enumerate() {
                u.availability = match &settings.availability {
                    Some(a) if a.len() == n_mod => a.clone(),
                    _ => vec![true; n_mod],
                };
                let (aug, recs) = apply_pipeline(&Sample::from_unit(u), &settings.tta, derive_seed(seed, "tta", i))?;
                let mut au = u.clone();
                au.data = aug.image;
                let p = model.predict_units(std::slice::from_ref(&au), dropout, rng)?.remove(0);
                preds.push(p);
                all_records.push(recs);
            }
            let back: Vec<Array4<f32>> = preds
                .iter()
                .zip(&all_records)
                .map(|(p, r)| invert_geometry(p, r))
                .collect::<Result<_, _>>()?;
            reconstruct_volume(&units, &back)?
        }
    };
    let native = restore_native(&soft.data, &records)?;
    if native.shape()[1..] != volume.data.shape()[1..] {
        return Err(EvalError::Geometry(format!("restored prediction {:?} does not match input {:?}", native.shape(), volume.data.shape())));
    }
    Ok(Volume::new(native, volume.spacing, volume.affine)?)
}

/// Soft prediction on the input grid; geometry copied bit-exactly.
pub fn segment_volume(model: &mut Model, volume: &Volume, settings: &InferenceSettings) -> Result<Volume, EvalError> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    predict_native(model, volume, settings, false, None, &mut rng)
}
