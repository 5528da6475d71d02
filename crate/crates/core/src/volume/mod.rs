//! Volumetric images: geometry, NIfTI I/O, orientation handling, and the
//! slice/patch decomposition used by the loader and by inference.

mod nifti;
mod orientation;
mod units;

pub use nifti::{read_nifti, read_nifti_bytes, write_nifti, write_nifti_bytes, NiftiError};
pub use orientation::{reorient, AxisCode, Orientation, OrientationError};
pub use units::{
    bounding_box, extract_units, reconstruct_volume, BoundingBox, ExtractMode, SampleUnit,
    UnitError, UnitKind, UnitSpec,
};

use ndarray::Array4;
use thiserror::Error;

/// Voxel-to-world affine, row-major.
pub type Affine = [[f64; 4]; 4];

pub const IDENTITY_AFFINE: Affine = [
    [1.0, 0.0, 0.0, 0.0],
    [0.0, 1.0, 0.0, 0.0],
    [0.0, 0.0, 1.0, 0.0],
    [0.0, 0.0, 0.0, 1.0],
];

#[derive(Debug, Error)]
pub enum VolumeError {
    #[error("voxel spacing must be strictly positive and finite, got {0:?}")]
    InvalidSpacing([f64; 3]),
    #[error("affine is singular")]
    SingularAffine,
    #[error("affine column norms {norms:?} disagree with spacing {spacing:?}")]
    AffineSpacingMismatch { norms: [f64; 3], spacing: [f64; 3] },
    #[error("volume contains {0} NaN voxels")]
    NaN(usize),
    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch { expected: Vec<usize>, got: Vec<usize> },
}

/// Spatial frame of a volume, shared by everything derived from it.
#[derive(Debug, Clone, PartialEq)]
pub struct Geometry {
    pub shape: [usize; 3],
    pub spacing: [f64; 3],
    pub affine: Affine,
}

impl Geometry {
    pub fn voxel_volume_mm3(&self) -> f64 {
        self.spacing.iter().product()
    }

    pub fn orientation(&self) -> Orientation {
        Orientation::from_affine(&self.affine)
    }

    pub fn n_voxels(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Multi-channel intensity array `(C, X, Y, Z)` with its world frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub data: Array4<f32>,
    pub spacing: [f64; 3],
    pub affine: Affine,
}

impl Volume {
    /// Builds a volume after checking spacing, affine and NaN invariants.
    pub fn new(data: Array4<f32>, spacing: [f64; 3], affine: Affine) -> Result<Self, VolumeError> {
        let v = Self {
            data,
            spacing,
            affine,
        };
        v.validate()?;
        Ok(v)
    }

    /// Volume with an axis-aligned affine derived from the spacing.
    pub fn from_array(data: Array4<f32>, spacing: [f64; 3]) -> Result<Self, VolumeError> {
        let mut affine = IDENTITY_AFFINE;
        for (i, s) in spacing.iter().enumerate() {
            affine[i][i] = *s;
        }
        Self::new(data, spacing, affine)
    }

    pub fn validate(&self) -> Result<(), VolumeError> {
        if self.spacing.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(VolumeError::InvalidSpacing(self.spacing));
        }
        if determinant3(&self.affine).abs() < 1e-12 {
            return Err(VolumeError::SingularAffine);
        }
        let norms = column_norms(&self.affine);
        for i in 0..3 {
            if ((norms[i] - self.spacing[i]) / self.spacing[i]).abs() > 1e-3 {
                return Err(VolumeError::AffineSpacingMismatch {
                    norms,
                    spacing: self.spacing,
                });
            }
        }
        let nans = self.data.iter().filter(|v| v.is_nan()).count();
        if nans > 0 {
            return Err(VolumeError::NaN(nans));
        }
        Ok(())
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn shape3(&self) -> [usize; 3] {
        let s = self.data.shape();
        [s[1], s[2], s[3]]
    }

    pub fn geometry(&self) -> Geometry {
        Geometry {
            shape: self.shape3(),
            spacing: self.spacing,
            affine: self.affine,
        }
    }

    pub fn orientation(&self) -> Orientation {
        Orientation::from_affine(&self.affine)
    }

    /// Same geometry, different voxel content.
    pub fn with_data(&self, data: Array4<f32>) -> Result<Self, VolumeError> {
        let s = data.shape();
        if [s[1], s[2], s[3]] != self.shape3() {
            return Err(VolumeError::ShapeMismatch {
                expected: self.shape3().to_vec(),
                got: vec![s[1], s[2], s[3]],
            });
        }
        Ok(Self {
            data,
            spacing: self.spacing,
            affine: self.affine,
        })
    }

    /// World coordinate (mm) of a voxel index.
    pub fn world(&self, ijk: [f64; 3]) -> [f64; 3] {
        apply_affine(&self.affine, ijk)
    }
}

pub fn apply_affine(a: &Affine, p: [f64; 3]) -> [f64; 3] {
    let mut out = [0.0; 3];
    for (r, o) in out.iter_mut().enumerate() {
        *o = a[r][0] * p[0] + a[r][1] * p[1] + a[r][2] * p[2] + a[r][3];
    }
    out
}

pub fn column_norms(a: &Affine) -> [f64; 3] {
    let mut n = [0.0; 3];
    for (c, v) in n.iter_mut().enumerate() {
        *v = (a[0][c].powi(2) + a[1][c].powi(2) + a[2][c].powi(2)).sqrt();
    }
    n
}

fn determinant3(a: &Affine) -> f64 {
    a[0][0] * (a[1][1] * a[2][2] - a[1][2] * a[2][1]) - a[0][1] * (a[1][0] * a[2][2] - a[1][2] * a[2][0])
        + a[0][2] * (a[1][0] * a[2][1] - a[1][1] * a[2][0])
}

pub fn matmul_affine(a: &Affine, b: &Affine) -> Affine {
    let mut out = [[0.0; 4]; 4];
    for (i, row) in out.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = (0..4).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_spacing_and_nan() {
        let data = Array4::<f32>::zeros((1, 2, 2, 2));
        assert!(matches!(
            Volume::from_array(data.clone(), [1.0, 0.0, 1.0]),
            Err(VolumeError::InvalidSpacing(_))
        ));
        let mut nan = data.clone();
        nan[[0, 1, 1, 1]] = f32::NAN;
        assert!(matches!(Volume::from_array(nan, [1.0; 3]), Err(VolumeError::NaN(1))));
    }

    #[test]
    fn affine_must_agree_with_spacing() {
        let data = Array4::<f32>::zeros((1, 2, 2, 2));
        let err = Volume::new(data, [2.0, 1.0, 1.0], IDENTITY_AFFINE).unwrap_err();
        assert!(matches!(err, VolumeError::AffineSpacingMismatch { .. }));
    }
}
