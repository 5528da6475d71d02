use log::warn;
use ndarray::{s, Array4};
use rand_chacha::ChaCha8Rng;

use super::{Model, ModelError};
use crate::meta::Metadata;
use crate::volume::{apply_affine, bounding_box, BoundingBox, UnitError, UnitSpec, Volume};

#[derive(Debug, Clone)]
pub struct CascadeOutput {
    /// Binary mask on the full input grid.
    pub mask: Volume,
    /// Segmenter probabilities on the full input grid (zero outside the box).
    pub soft: Volume,
    /// Detection box, `None` when detection was empty and the whole image
    /// was segmented.
    pub bbox: Option<BoundingBox>,
}

fn crop(volume: &Volume, b: &BoundingBox) -> Result<Volume, ModelError> {
    let data = volume
        .data
        .slice(s![.., b.min[0]..=b.max[0], b.min[1]..=b.max[1], b.min[2]..=b.max[2]])
        .to_owned();
    let mut affine = volume.affine;
    let origin = apply_affine(&volume.affine, b.min.map(|v| v as f64));
    for (r, o) in origin.iter().enumerate() {
        affine[r][3] = *o;
    }
    Ok(Volume::new(data, volume.spacing, affine)?)
}

/// Union over class channels of `p >= threshold`, as a single channel.
fn binarize(soft: &Volume, threshold: f32) -> Result<Volume, ModelError> {
    let [x, y, z] = soft.shape3();
    let mut out = Array4::<f32>::zeros((1, x, y, z));
    for ((_, i, j, k), v) in soft.data.indexed_iter() {
        if *v >= threshold {
            out[[0, i, j, k]] = 1.0;
        }
    }
    Ok(soft.with_data(out)?)
}

/// Two-stage inference: the detector's thresholded output is boxed with
/// `margin` voxels, the segmenter runs on that crop and its output is
/// zero-padded back to the full grid.
#[allow(clippy::too_many_arguments)]
pub fn cascade_predict(
    image: &Volume,
    detector: &mut Model,
    detector_units: &UnitSpec,
    segmenter: &mut Model,
    segmenter_units: &UnitSpec,
    margin: usize,
    metadata: &Metadata,
    threshold: f32,
) -> Result<CascadeOutput, ModelError> {
    let mut rng = <ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
    let coarse = detector.predict_volume(image, detector_units, metadata, false, &mut rng)?;
    if coarse.shape3() != image.shape3() {
        return Err(ModelError::Shape(format!(
            "detector output grid {:?} differs from image grid {:?}",
            coarse.shape3(),
            image.shape3()
        )));
    }
    let detection = binarize(&coarse, threshold)?;
    let bbox = match bounding_box(&detection, margin) {
        Ok(b) => Some(b),
        Err(UnitError::EmptyMask) => {
            warn!("detector found nothing; segmenting the whole image");
            None
        }
        Err(e) => return Err(e.into()),
    };
    let soft = match &bbox {
        None => segmenter.predict_volume(image, segmenter_units, metadata, false, &mut rng)?,
        Some(b) => {
            let region = crop(image, b)?;
            let pred = segmenter.predict_volume(&region, segmenter_units, metadata, false, &mut rng)?;
            let [x, y, z] = image.shape3();
            let mut full = Array4::<f32>::zeros((pred.channels(), x, y, z));
            full.slice_mut(s![.., b.min[0]..=b.max[0], b.min[1]..=b.max[1], b.min[2]..=b.max[2]])
                .assign(&pred.data);
            image.with_data(full)?
        }
    };
    let mask = binarize(&soft, threshold)?;
    Ok(CascadeOutput { mask, soft, bbox })
}
