//! Decomposition of volumes into slices or patches and the inverse
//! placement of per-unit predictions back into the source frame.

use ndarray::{s, Array4, Axis};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{Geometry, Volume};
use crate::meta::Metadata;

#[derive(Debug, Error, PartialEq)]
pub enum UnitError {
    #[error("patch shape {patch:?} exceeds volume shape {volume:?}")]
    PatchTooLarge { patch: [usize; 3], volume: [usize; 3] },
    #[error("stride {stride:?} must be between 1 and the patch shape {patch:?}")]
    InvalidStride { stride: [usize; 3], patch: [usize; 3] },
    #[error("slice axis must be 0, 1 or 2, got {0}")]
    InvalidAxis(usize),
    #[error("label shape {label:?} does not match image shape {image:?}")]
    LabelShape { label: [usize; 3], image: [usize; 3] },
    #[error("{units} units but {predictions} predictions")]
    CountMismatch { units: usize, predictions: usize },
    #[error("units come from different volumes: {0:?} and {1:?}")]
    MixedVolumes(String, String),
    #[error("prediction {index} has spatial shape {got:?}, unit expects {expected:?}")]
    PredictionShape {
        index: usize,
        expected: [usize; 3],
        got: [usize; 3],
    },
    #[error("no units to reconstruct")]
    Empty,
    #[error("mask is empty")]
    EmptyMask,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExtractMode {
    Volume,
    Slice,
    Patch,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UnitSpec {
    pub mode: ExtractMode,
    pub slice_axis: usize,
    pub patch_shape: [usize; 3],
    pub stride: [usize; 3],
}

impl UnitSpec {
    pub fn volume() -> Self {
        Self {
            mode: ExtractMode::Volume,
            slice_axis: 2,
            patch_shape: [1; 3],
            stride: [1; 3],
        }
    }

    pub fn slices(axis: usize) -> Self {
        Self {
            mode: ExtractMode::Slice,
            slice_axis: axis,
            ..Self::volume()
        }
    }

    pub fn patches(patch_shape: [usize; 3], stride: [usize; 3]) -> Self {
        Self {
            mode: ExtractMode::Patch,
            patch_shape,
            stride,
            ..Self::volume()
        }
    }
}

/// Where a unit came from inside its source volume.
#[derive(Debug, Clone, PartialEq)]
pub enum UnitKind {
    Volume,
    Slice { axis: usize, index: usize },
    Patch { origin: [usize; 3], shape: [usize; 3] },
}

/// A 2D slice or 3D patch plus the provenance needed to put it back.
///
/// `data` is always `(C, a, b, c)`; slices carry a trailing singleton axis
/// and their in-plane axes are the two source axes other than `axis`, in
/// increasing order.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleUnit {
    pub data: Array4<f32>,
    pub label: Option<Array4<f32>>,
    pub kind: UnitKind,
    pub volume_id: String,
    pub source: Geometry,
    /// Voxel spacing of the unit's own axes.
    pub spacing: [f64; 3],
    pub metadata: Metadata,
    /// Per-channel availability of input modalities (all true unless a
    /// modality was missing on disk).
    pub availability: Vec<bool>,
}

impl SampleUnit {
    pub fn is_2d(&self) -> bool {
        matches!(self.kind, UnitKind::Slice { .. })
    }

    pub fn shape3(&self) -> [usize; 3] {
        let s = self.data.shape();
        [s[1], s[2], s[3]]
    }

    /// Spatial dims as seen by the network (two for slices).
    pub fn spatial_shape(&self) -> Vec<usize> {
        let s = self.shape3();
        if self.is_2d() {
            s[..2].to_vec()
        } else {
            s.to_vec()
        }
    }
}

pub(crate) fn tile_origins(dim: usize, patch: usize, stride: usize) -> Vec<usize> {
    let mut origins = Vec::new();
    let mut o = 0;
    while o + patch <= dim {
        origins.push(o);
        o += stride;
    }
    if let Some(&last) = origins.last() {
        if last + patch < dim {
            origins.push(dim - patch);
        }
    }
    origins
}

fn other_axes(axis: usize) -> [usize; 2] {
    match axis {
        0 => [1, 2],
        1 => [0, 2],
        _ => [0, 1],
    }
}

fn slice_of(data: &Array4<f32>, axis: usize, index: usize) -> Array4<f32> {
    let plane = data.index_axis(Axis(axis + 1), index);
    plane.insert_axis(Axis(3)).as_standard_layout().to_owned()
}

pub fn extract_units(
    volume: &Volume,
    label: Option<&Volume>,
    spec: &UnitSpec,
    volume_id: &str,
    metadata: &Metadata,
) -> Result<Vec<SampleUnit>, UnitError> {
    let dims = volume.shape3();
    if let Some(l) = label {
        if l.shape3() != dims {
            return Err(UnitError::LabelShape {
                label: l.shape3(),
                image: dims,
            });
        }
    }
    let source = volume.geometry();
    let availability = vec![true; volume.channels()];
    let make = |data: Array4<f32>, label: Option<Array4<f32>>, kind: UnitKind, spacing: [f64; 3]| SampleUnit {
        data,
        label,
        kind,
        volume_id: volume_id.to_string(),
        source: source.clone(),
        spacing,
        metadata: metadata.clone(),
        availability: availability.clone(),
    };

    let units = match spec.mode {
        ExtractMode::Volume => vec![make(
            volume.data.clone(),
            label.map(|l| l.data.clone()),
            UnitKind::Volume,
            volume.spacing,
        )],
        ExtractMode::Slice => {
            let axis = spec.slice_axis;
            if axis > 2 {
                return Err(UnitError::InvalidAxis(axis));
            }
            let [a, b] = other_axes(axis);
            let spacing = [volume.spacing[a], volume.spacing[b], volume.spacing[axis]];
            (0..dims[axis])
                .map(|index| {
                    make(
                        slice_of(&volume.data, axis, index),
                        label.map(|l| slice_of(&l.data, axis, index)),
                        UnitKind::Slice { axis, index },
                        spacing,
                    )
                })
                .collect()
        }
        ExtractMode::Patch => {
            let p = spec.patch_shape;
            if (0..3).any(|i| p[i] > dims[i] || p[i] == 0) {
                return Err(UnitError::PatchTooLarge { patch: p, volume: dims });
            }
            // a stride above the patch size would leave uncovered gaps
            if (0..3).any(|i| spec.stride[i] == 0 || spec.stride[i] > p[i]) {
                return Err(UnitError::InvalidStride {
                    stride: spec.stride,
                    patch: p,
                });
            }
            let ox = tile_origins(dims[0], p[0], spec.stride[0]);
            let oy = tile_origins(dims[1], p[1], spec.stride[1]);
            let oz = tile_origins(dims[2], p[2], spec.stride[2]);
            let mut units = Vec::with_capacity(ox.len() * oy.len() * oz.len());
            for &x in &ox {
                for &y in &oy {
                    for &z in &oz {
                        let crop = |d: &Array4<f32>| d.slice(s![.., x..x + p[0], y..y + p[1], z..z + p[2]]).to_owned();
                        units.push(make(
                            crop(&volume.data),
                            label.map(|l| crop(&l.data)),
                            UnitKind::Patch {
                                origin: [x, y, z],
                                shape: p,
                            },
                            volume.spacing,
                        ));
                    }
                }
            }
            units
        }
    };
    Ok(units)
}

/// Places predictions by provenance; overlapping voxels are averaged and
/// voxels no unit covers are zero.
pub fn reconstruct_volume(units: &[SampleUnit], predictions: &[Array4<f32>]) -> Result<Volume, UnitError> {
    if units.len() != predictions.len() {
        return Err(UnitError::CountMismatch {
            units: units.len(),
            predictions: predictions.len(),
        });
    }
    let first = units.first().ok_or(UnitError::Empty)?;
    let geometry = &first.source;
    let channels = predictions[0].shape()[0];
    let [nx, ny, nz] = geometry.shape;
    // f64 accumulation keeps repeated identical contributions exact
    let mut sum = Array4::<f64>::zeros((channels, nx, ny, nz));
    let mut count = ndarray::Array3::<u32>::zeros((nx, ny, nz));

    for (index, (unit, pred)) in units.iter().zip(predictions).enumerate() {
        if unit.volume_id != first.volume_id {
            return Err(UnitError::MixedVolumes(first.volume_id.clone(), unit.volume_id.clone()));
        }
        let ps = pred.shape();
        let got = [ps[1], ps[2], ps[3]];
        if got != unit.shape3() || ps[0] != channels {
            return Err(UnitError::PredictionShape {
                index,
                expected: unit.shape3(),
                got,
            });
        }
        match &unit.kind {
            UnitKind::Volume => {
                sum.zip_mut_with(pred, |s, p| *s += *p as f64);
                count.mapv_inplace(|c| c + 1);
            }
            UnitKind::Slice { axis, index } => {
                let mut target = sum.index_axis_mut(Axis(axis + 1), *index);
                let plane = pred.index_axis(Axis(3), 0);
                target.zip_mut_with(&plane, |s, p| *s += *p as f64);
                count.index_axis_mut(Axis(*axis), *index).mapv_inplace(|c| c + 1);
            }
            UnitKind::Patch { origin: o, shape: p } => {
                let mut target = sum.slice_mut(s![.., o[0]..o[0] + p[0], o[1]..o[1] + p[1], o[2]..o[2] + p[2]]);
                target.zip_mut_with(pred, |s, v| *s += *v as f64);
                count
                    .slice_mut(s![o[0]..o[0] + p[0], o[1]..o[1] + p[1], o[2]..o[2] + p[2]])
                    .mapv_inplace(|c| c + 1);
            }
        }
    }

    let mut data = Array4::<f32>::zeros((channels, nx, ny, nz));
    for c in 0..channels {
        for ((x, y, z), n) in count.indexed_iter() {
            if *n > 0 {
                data[[c, x, y, z]] = (sum[[c, x, y, z]] / *n as f64) as f32;
            }
        }
    }
    Ok(Volume {
        data,
        spacing: geometry.spacing,
        affine: geometry.affine,
    })
}

/// Inclusive voxel box.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BoundingBox {
    pub min: [usize; 3],
    pub max: [usize; 3],
}

impl BoundingBox {
    pub fn shape(&self) -> [usize; 3] {
        [
            self.max[0] - self.min[0] + 1,
            self.max[1] - self.min[1] + 1,
            self.max[2] - self.min[2] + 1,
        ]
    }

    pub fn contains(&self, p: [usize; 3]) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] && p[i] <= self.max[i])
    }
}

/// Tight box over nonzero voxels of any channel, grown by `margin` and
/// clamped to the volume.
pub fn bounding_box(mask: &Volume, margin: usize) -> Result<BoundingBox, UnitError> {
    let dims = mask.shape3();
    let mut lo = [usize::MAX; 3];
    let mut hi = [0usize; 3];
    let mut any = false;
    for ((_, x, y, z), v) in mask.data.indexed_iter() {
        if *v != 0.0 {
            any = true;
            for (i, c) in [x, y, z].into_iter().enumerate() {
                lo[i] = lo[i].min(c);
                hi[i] = hi[i].max(c);
            }
        }
    }
    if !any {
        return Err(UnitError::EmptyMask);
    }
    for i in 0..3 {
        lo[i] = lo[i].saturating_sub(margin);
        hi[i] = (hi[i] + margin).min(dims[i] - 1);
    }
    Ok(BoundingBox { min: lo, max: hi })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ramp(c: usize, dims: [usize; 3]) -> Volume {
        let data = Array4::from_shape_fn((c, dims[0], dims[1], dims[2]), |(c, x, y, z)| {
            (c * 7919 + x * 131 + y * 17 + z) as f32 * 0.37
        });
        Volume::from_array(data, [1.0, 1.5, 2.0]).unwrap()
    }

    fn echo(units: &[SampleUnit]) -> Vec<Array4<f32>> {
        units.iter().map(|u| u.data.clone()).collect()
    }

    #[test]
    fn slice_counting() {
        let v = ramp(1, [8, 8, 4]);
        let units = extract_units(&v, None, &UnitSpec::slices(2), "v", &Metadata::new()).unwrap();
        assert_eq!(units.len(), 4);
        assert!(units.iter().all(|u| u.spatial_shape() == vec![8, 8]));
    }

    #[test]
    fn patch_tiling_counts() {
        let v = ramp(1, [8, 8, 8]);
        let units = extract_units(&v, None, &UnitSpec::patches([4; 3], [4; 3]), "v", &Metadata::new()).unwrap();
        assert_eq!(units.len(), 8);

        let v = ramp(1, [10, 10, 10]);
        let units = extract_units(&v, None, &UnitSpec::patches([4; 3], [3; 3]), "v", &Metadata::new()).unwrap();
        assert_eq!(units.len(), 27);
        let mut xs: Vec<usize> = units
            .iter()
            .map(|u| match u.kind {
                UnitKind::Patch { origin, .. } => origin[0],
                _ => unreachable!(),
            })
            .collect();
        xs.dedup();
        xs.sort();
        xs.dedup();
        assert_eq!(xs, vec![0, 3, 6]);
    }

    #[test]
    fn oversize_patch_rejected() {
        let v = ramp(1, [4, 4, 4]);
        let err = extract_units(&v, None, &UnitSpec::patches([5, 4, 4], [1; 3]), "v", &Metadata::new()).unwrap_err();
        assert!(matches!(err, UnitError::PatchTooLarge { .. }));
    }

    #[test]
    fn stride_beyond_patch_rejected() {
        let v = ramp(1, [6, 6, 6]);
        let err = extract_units(&v, None, &UnitSpec::patches([2; 3], [3, 1, 1]), "v", &Metadata::new()).unwrap_err();
        assert!(matches!(err, UnitError::InvalidStride { .. }));
    }

    #[test]
    fn overlapping_mean() {
        let v = ramp(1, [3, 1, 1]);
        let units = extract_units(&v, None, &UnitSpec::patches([2, 1, 1], [1, 1, 1]), "v", &Metadata::new()).unwrap();
        assert_eq!(units.len(), 2);
        let preds = vec![Array4::zeros((1, 2, 1, 1)), Array4::ones((1, 2, 1, 1))];
        let out = reconstruct_volume(&units, &preds).unwrap();
        assert_eq!(out.data.as_slice().unwrap(), &[0.0, 0.5, 1.0]);
    }

    #[test]
    fn reconstruct_errors() {
        let v = ramp(1, [4, 4, 2]);
        let units = extract_units(&v, None, &UnitSpec::slices(2), "v", &Metadata::new()).unwrap();
        assert!(matches!(
            reconstruct_volume(&units, &echo(&units)[..1]),
            Err(UnitError::CountMismatch { .. })
        ));
        let mut mixed = units.clone();
        mixed[1].volume_id = "w".into();
        assert!(matches!(reconstruct_volume(&mixed, &echo(&units)), Err(UnitError::MixedVolumes(..))));
    }

    #[test]
    fn bounding_boxes() {
        let mut data = Array4::zeros((1, 6, 6, 6));
        data[[0, 2, 2, 2]] = 1.0;
        let m = Volume::from_array(data, [1.0; 3]).unwrap();
        assert_eq!(bounding_box(&m, 1).unwrap(), BoundingBox { min: [1; 3], max: [3; 3] });
        assert_eq!(bounding_box(&m, 0).unwrap(), BoundingBox { min: [2; 3], max: [2; 3] });
        assert_eq!(bounding_box(&m, 100).unwrap(), BoundingBox { min: [0; 3], max: [5; 3] });
        let empty = Volume::from_array(Array4::zeros((1, 3, 3, 3)), [1.0; 3]).unwrap();
        assert_eq!(bounding_box(&empty, 1), Err(UnitError::EmptyMask));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(50))]
        #[test]
        fn extract_reconstruct_identity(
            dims in prop::array::uniform3(1usize..11),
            patch_frac in prop::array::uniform3(0.1f64..1.0),
            stride in prop::array::uniform3(1usize..5),
            axis in 0usize..3,
            channels in 1usize..3,
        ) {
            let v = ramp(channels, dims);
            let patch = [0, 1, 2].map(|i| ((dims[i] as f64 * patch_frac[i]).ceil() as usize).clamp(1, dims[i]));
            let stride = [0, 1, 2].map(|i| stride[i].min(patch[i]));
            for spec in [UnitSpec::slices(axis), UnitSpec::patches(patch, stride), UnitSpec::volume()] {
                let units = extract_units(&v, None, &spec, "v", &Metadata::new()).unwrap();
                // coverage: every voxel is hit at least once
                let ones: Vec<_> = units.iter().map(|u| Array4::ones((1, u.shape3()[0], u.shape3()[1], u.shape3()[2]))).collect();
                let cover = reconstruct_volume(&units, &ones).unwrap();
                prop_assert!(cover.data.iter().all(|c| *c == 1.0));
                let back = reconstruct_volume(&units, &echo(&units)).unwrap();
                prop_assert_eq!(&back.data, &v.data);
                prop_assert_eq!(back.geometry(), v.geometry());
            }
        }
    }
}
