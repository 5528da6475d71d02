//! Preprocessing and augmentation with recorded parameters so that
//! invertible steps can be undone (test-time augmentation, crops).

use std::collections::BTreeMap;

use ndarray::{s, Array3, Array4, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::distance::squared_edt;
use crate::volume::{Affine, SampleUnit, Volume, VolumeError};

#[derive(Debug, Error)]
pub enum TransformError {
    #[error("invalid transform parameter `{field}`: {msg}")]
    InvalidParam { field: String, msg: String },
    #[error("cannot normalize: channel {0} has zero variance")]
    ConstantVolume(usize),
    #[error("label must be binary for {0}")]
    NonBinaryLabel(String),
    #[error("transform `{0}` is not invertible")]
    NotInvertible(String),
    #[error("malformed record for `{0}`")]
    BadRecord(String),
    #[error(transparent)]
    Volume(#[from] VolumeError),
}

type Result<T> = std::result::Result<T, TransformError>;

fn invalid(field: &str, msg: impl Into<String>) -> TransformError {
    TransformError::InvalidParam {
        field: field.to_string(),
        msg: msg.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scope {
    Image,
    Label,
    Both,
}

impl Scope {
    fn image(self) -> bool {
        self != Scope::Label
    }
    fn label(self) -> bool {
        self != Scope::Image
    }
}

fn default_order() -> u8 {
    1
}
fn full_range() -> [f64; 2] {
    [0.0, 100.0]
}
fn unit_range() -> [f64; 2] {
    [1.0, 1.0]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", content = "params", rename_all = "snake_case", deny_unknown_fields)]
pub enum TransformKind {
    Resample {
        spacing: [f64; 3],
        #[serde(default = "default_order")]
        order: u8,
    },
    CropOrPad {
        shape: [usize; 3],
        /// Voxel center, `None` for the grid center.
        #[serde(default)]
        center: Option<[usize; 3]>,
    },
    NormalizeZscore {
        #[serde(default)]
        nonzero_only: bool,
    },
    IntensityAdjust {
        #[serde(default = "full_range")]
        clip_percentiles: [f64; 2],
        #[serde(default)]
        equalize: bool,
    },
    AffineAugment {
        #[serde(default)]
        rotation_deg: [f64; 2],
        #[serde(default = "unit_range")]
        scale: [f64; 2],
        #[serde(default)]
        translation_vox: [f64; 2],
    },
    ElasticAugment {
        alpha: f64,
        sigma: f64,
    },
    DilateGroundTruth {
        dilation_mm: f64,
    },
}

impl TransformKind {
    pub fn name(&self) -> &'static str {
        match self {
            TransformKind::Resample { .. } => "resample",
            TransformKind::CropOrPad { .. } => "crop_or_pad",
            TransformKind::NormalizeZscore { .. } => "normalize_zscore",
            TransformKind::IntensityAdjust { .. } => "intensity_adjust",
            TransformKind::AffineAugment { .. } => "affine_augment",
            TransformKind::ElasticAugment { .. } => "elastic_augment",
            TransformKind::DilateGroundTruth { .. } => "dilate_ground_truth",
        }
    }

    pub fn default_scope(&self) -> Scope {
        match self {
            TransformKind::NormalizeZscore { .. } | TransformKind::IntensityAdjust { .. } => Scope::Image,
            TransformKind::DilateGroundTruth { .. } => Scope::Label,
            _ => Scope::Both,
        }
    }

    /// Deterministic steps applied once per volume at load time; the rest
    /// are random augmentations applied per training unit.
    pub fn is_preprocessing(&self) -> bool {
        matches!(
            self,
            TransformKind::Resample { .. } | TransformKind::CropOrPad { .. } | TransformKind::NormalizeZscore { .. } | TransformKind::IntensityAdjust { .. }
        )
    }

    pub fn validate(&self) -> Result<()> {
        let range = |field: &str, r: [f64; 2]| {
            if !r[0].is_finite() || !r[1].is_finite() || r[0] > r[1] {
                Err(invalid(field, format!("{r:?} is not a finite [lo, hi] range")))
            } else {
                Ok(())
            }
        };
        match self {
            TransformKind::Resample { spacing, order } => {
                if spacing.iter().any(|s| !s.is_finite() || *s <= 0.0) {
                    return Err(invalid("spacing", "must be positive"));
                }
                if *order > 2 {
                    return Err(invalid("order", "must be 0, 1 or 2"));
                }
            }
            TransformKind::CropOrPad { shape, .. } => {
                if shape.contains(&0) {
                    return Err(invalid("shape", "must be positive"));
                }
            }
            TransformKind::NormalizeZscore { .. } => {}
            TransformKind::IntensityAdjust { clip_percentiles: [lo, hi], .. } => check_percentiles(*lo, *hi)?,
            TransformKind::AffineAugment { rotation_deg, scale, translation_vox } => {
                range("rotation_deg", *rotation_deg)?;
                range("scale", *scale)?;
                range("translation_vox", *translation_vox)?;
                if scale[0] <= 0.0 {
                    return Err(invalid("scale", "must be positive"));
                }
            }
            TransformKind::ElasticAugment { alpha, sigma } => {
                if !alpha.is_finite() || *alpha < 0.0 {
                    return Err(invalid("alpha", "must be >= 0"));
                }
                if !sigma.is_finite() || *sigma <= 0.0 {
                    return Err(invalid("sigma", "must be > 0"));
                }
            }
            TransformKind::DilateGroundTruth { dilation_mm } => {
                if !dilation_mm.is_finite() || *dilation_mm < 0.0 {
                    return Err(invalid("dilation_mm", "must be >= 0"));
                }
            }
        }
        Ok(())
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSpec {
    name: String,
    #[serde(default)]
    params: Option<Value>,
    #[serde(default)]
    scope: Option<Scope>,
}

/// One entry of the configured transform list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawSpec")]
pub struct TransformSpec {
    #[serde(flatten)]
    pub kind: TransformKind,
    pub scope: Scope,
}

impl TryFrom<RawSpec> for TransformSpec {
    type Error = String;

    fn try_from(raw: RawSpec) -> std::result::Result<Self, String> {
        let params = raw.params.unwrap_or_else(|| json!({}));
        let kind: TransformKind = serde_json::from_value(json!({"name": raw.name, "params": params}))
            .map_err(|e| format!("transform `{}`: {e}", raw.name))?;
        kind.validate().map_err(|e| format!("transform `{}`: {e}", raw.name))?;
        let scope = raw.scope.unwrap_or_else(|| kind.default_scope());
        Ok(TransformSpec { kind, scope })
    }
}

impl TransformSpec {
    pub fn new(kind: TransformKind) -> Self {
        let scope = kind.default_scope();
        TransformSpec { kind, scope }
    }
}

/// Parameters actually applied by one transform.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformRecord {
    pub name: String,
    pub params: BTreeMap<String, Value>,
    pub scope: Scope,
    pub invertible: bool,
}

impl TransformRecord {
    fn new(name: &str, scope: Scope, invertible: bool, params: Value) -> Self {
        let params = match params {
            Value::Object(m) => m.into_iter().collect(),
            _ => BTreeMap::new(),
        };
        TransformRecord {
            name: name.to_string(),
            params,
            scope,
            invertible,
        }
    }

    fn get<T: serde::de::DeserializeOwned>(&self, key: &str) -> Result<T> {
        self.params
            .get(key)
            .and_then(|v| serde_json::from_value(v.clone()).ok())
            .ok_or_else(|| TransformError::BadRecord(self.name.clone()))
    }
}

/// Image, optional label and the geometry they share.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Array4<f32>,
    pub label: Option<Array4<f32>>,
    pub spacing: [f64; 3],
    pub affine: Affine,
}

impl Sample {
    pub fn from_unit(unit: &SampleUnit) -> Self {
        Sample {
            image: unit.data.clone(),
            label: unit.label.clone(),
            spacing: unit.spacing,
            affine: crate::volume::IDENTITY_AFFINE,
        }
    }

    pub fn from_volume(image: &Volume, label: Option<&Volume>) -> Self {
        Sample {
            image: image.data.clone(),
            label: label.map(|l| l.data.clone()),
            spacing: image.spacing,
            affine: image.affine,
        }
    }

    pub fn image_volume(&self) -> Result<Volume> {
        Ok(Volume::new(self.image.clone(), self.spacing, self.affine)?)
    }

    pub fn label_volume(&self) -> Result<Option<Volume>> {
        Ok(match &self.label {
            Some(l) => Some(Volume::new(l.clone(), self.spacing, self.affine)?),
            None => None,
        })
    }

    fn shape3(&self) -> [usize; 3] {
        let s = self.image.shape();
        [s[1], s[2], s[3]]
    }
}

/// Stable per-sample seed from the global seed, volume id and unit index.
pub fn derive_seed(global: u64, volume_id: &str, unit_index: usize) -> u64 {
    let mut h = Sha256::new();
    h.update(global.to_le_bytes());
    h.update(volume_id.as_bytes());
    h.update([0u8]);
    h.update((unit_index as u64).to_le_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().unwrap())
}

fn is_binary(a: &Array4<f32>) -> bool {
    a.iter().all(|v| *v == 0.0 || *v == 1.0)
}

// ---------------------------------------------------------------- resample

fn bspline2(x: f64) -> f64 {
    let a = x.abs();
    if a < 0.5 {
        0.75 - a * a
    } else if a < 1.5 {
        0.5 * (a - 1.5) * (a - 1.5)
    } else {
        0.0
    }
}

fn mirror(i: i64, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as i64 - 1);
    let mut m = i.rem_euclid(period);
    if m >= n as i64 {
        m = period - m;
    }
    m as usize
}

/// Interpolation coefficients for quadratic B-splines with mirror
/// boundaries.
fn bspline2_prefilter(s: &[f64]) -> Vec<f64> {
    let n = s.len();
    if n < 2 {
        return s.to_vec();
    }
    let z = 8f64.sqrt() - 3.0;
    let mut c: Vec<f64> = s.iter().map(|v| v * 8.0).collect();
    // exact causal start for the mirror-periodic extension
    let period = 2 * n - 2;
    let mut zk = 1.0;
    let mut sum = 0.0;
    for k in 0..period {
        sum += zk * c[mirror(k as i64, n)];
        zk *= z;
    }
    sum /= 1.0 - zk;
    c[0] = sum;
    for k in 1..n {
        c[k] += z * c[k - 1];
    }
    c[n - 1] = (z / (z * z - 1.0)) * (c[n - 1] + z * c[n - 2]);
    for k in (0..n - 1).rev() {
        c[k] = z * (c[k + 1] - c[k]);
    }
    c
}

fn interp_1d(line: &[f64], x: f64, order: u8) -> f64 {
    let n = line.len();
    match order {
        0 => line[(x.round().max(0.0) as usize).min(n - 1)],
        1 => {
            let x = x.clamp(0.0, (n - 1) as f64);
            let i = (x.floor() as usize).min(n.saturating_sub(2));
            if n == 1 {
                return line[0];
            }
            let t = x - i as f64;
            line[i] * (1.0 - t) + line[i + 1] * t
        }
        _ => {
            let c = (x + 0.5).floor() as i64;
            (c - 1..=c + 1).map(|k| line[mirror(k, n)] * bspline2(x - k as f64)).sum()
        }
    }
}

fn resample_axis(data: &Array4<f32>, axis: usize, out_len: usize, ratio: f64, order: u8) -> Array4<f32> {
    let mut shape = data.raw_dim();
    shape[axis] = out_len;
    let mut out = Array4::<f32>::zeros(shape);
    for (lane_in, mut lane_out) in data.lanes(Axis(axis)).into_iter().zip(out.lanes_mut(Axis(axis))) {
        let raw: Vec<f64> = lane_in.iter().map(|v| *v as f64).collect();
        let line = if order == 2 { bspline2_prefilter(&raw) } else { raw };
        for (i, o) in lane_out.iter_mut().enumerate() {
            *o = interp_1d(&line, i as f64 * ratio, order) as f32;
        }
    }
    out
}

fn resample_array(data: &Array4<f32>, spacing: [f64; 3], target: [f64; 3], order: u8) -> Array4<f32> {
    let mut cur = data.clone();
    for ax in 0..3 {
        let dim = cur.shape()[ax + 1];
        let out_len = ((dim as f64 * spacing[ax] / target[ax]).round() as usize).max(1);
        if out_len == dim && spacing[ax] == target[ax] {
            continue;
        }
        cur = resample_axis(&cur, ax + 1, out_len, target[ax] / spacing[ax], order);
    }
    cur
}

fn check_spacing(target: [f64; 3]) -> Result<()> {
    if target.iter().any(|s| !s.is_finite() || *s <= 0.0) {
        return Err(invalid("spacing", format!("{target:?} must be positive")));
    }
    Ok(())
}

fn rescaled_affine(affine: &Affine, spacing: [f64; 3], target: [f64; 3]) -> Affine {
    let mut a = *affine;
    for (c, (t, s)) in target.iter().zip(spacing).enumerate() {
        for row in a.iter_mut().take(3) {
            row[c] *= t / s;
        }
    }
    a
}

/// Resamples to `target` spacing. Order 0 nearest, 1 linear, 2 quadratic
/// spline. Voxel (0,0,0) keeps its world position.
pub fn resample(volume: &Volume, target: [f64; 3], order: u8) -> Result<Volume> {
    check_spacing(target)?;
    if order > 2 {
        return Err(invalid("order", "must be 0, 1 or 2"));
    }
    let data = resample_array(&volume.data, volume.spacing, target, order);
    Ok(Volume::new(data, target, rescaled_affine(&volume.affine, volume.spacing, target))?)
}

// ---------------------------------------------------------------- crop

fn crop_pad_array(data: &Array4<f32>, start: [i64; 3], shape: [usize; 3]) -> Array4<f32> {
    let src = data.shape();
    let mut out = Array4::<f32>::zeros((src[0], shape[0], shape[1], shape[2]));
    let mut lo = [0usize; 3];
    let mut hi = [0usize; 3];
    for a in 0..3 {
        let s = start[a].max(0);
        let e = (start[a] + shape[a] as i64).min(src[a + 1] as i64);
        if e <= s {
            return out;
        }
        lo[a] = s as usize;
        hi[a] = e as usize;
    }
    let o = |a: usize| (lo[a] as i64 - start[a]) as usize;
    out.slice_mut(s![.., o(0)..o(0) + hi[0] - lo[0], o(1)..o(1) + hi[1] - lo[1], o(2)..o(2) + hi[2] - lo[2]])
        .assign(&data.slice(s![.., lo[0]..hi[0], lo[1]..hi[1], lo[2]..hi[2]]));
    out
}

fn crop_start(shape: [usize; 3], target: [usize; 3], center: Option<[usize; 3]>) -> [i64; 3] {
    let c = center.unwrap_or([shape[0] / 2, shape[1] / 2, shape[2] / 2]);
    [0, 1, 2].map(|a| c[a] as i64 - (target[a] / 2) as i64)
}

fn shifted_affine(affine: &Affine, start: [i64; 3]) -> Affine {
    let origin = crate::volume::apply_affine(affine, start.map(|v| v as f64));
    let mut a = *affine;
    for (r, o) in origin.iter().enumerate() {
        a[r][3] = *o;
    }
    a
}

/// Crops or zero-pads to `target`, keeping `center` (grid center when
/// `None`) at the middle of the output.
pub fn crop_or_pad(volume: &Volume, target: [usize; 3], center: Option<[usize; 3]>) -> Result<(Volume, TransformRecord)> {
    if target.contains(&0) {
        return Err(invalid("shape", "must be positive"));
    }
    let start = crop_start(volume.shape3(), target, center);
    let data = crop_pad_array(&volume.data, start, target);
    let out = Volume::new(data, volume.spacing, shifted_affine(&volume.affine, start))?;
    Ok((out, crop_record(start, volume.shape3(), Scope::Both)))
}

fn crop_record(start: [i64; 3], original: [usize; 3], scope: Scope) -> TransformRecord {
    TransformRecord::new("crop_or_pad", scope, true, json!({"start": start, "original_shape": original}))
}

// ---------------------------------------------------------------- intensity

fn channel_stats(data: &Array4<f32>, nonzero_only: bool) -> Result<Vec<(f64, f64)>> {
    let mut stats = Vec::new();
    for (c, ch) in data.axis_iter(Axis(0)).enumerate() {
        let vals: Vec<f64> = ch.iter().filter(|v| !nonzero_only || **v != 0.0).map(|v| *v as f64).collect();
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n.max(1.0);
        let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n.max(1.0);
        if vals.len() < 2 || var <= 0.0 || !var.is_finite() {
            return Err(TransformError::ConstantVolume(c));
        }
        stats.push((mean, var.sqrt()));
    }
    Ok(stats)
}

fn zscore_array(data: &Array4<f32>, nonzero_only: bool) -> Result<(Array4<f32>, Vec<(f64, f64)>)> {
    let stats = channel_stats(data, nonzero_only)?;
    let mut out = data.clone();
    for (mut ch, (m, s)) in out.axis_iter_mut(Axis(0)).zip(stats.iter()) {
        ch.mapv_inplace(|v| ((v as f64 - m) / s) as f32);
    }
    Ok((out, stats))
}

/// Per-channel standardization over all voxels (or non-zero voxels).
pub fn normalize_zscore(volume: &Volume, nonzero_only: bool) -> Result<Volume> {
    let (data, _) = zscore_array(&volume.data, nonzero_only)?;
    Ok(volume.with_data(data)?)
}

/// Percentile with linear interpolation between order statistics.
pub fn percentile(sorted: &[f64], p: f64) -> f64 {
    let pos = p / 100.0 * (sorted.len() - 1) as f64;
    let i = pos.floor() as usize;
    let j = (i + 1).min(sorted.len() - 1);
    sorted[i] + (sorted[j] - sorted[i]) * (pos - i as f64)
}

fn check_percentiles(lo: f64, hi: f64) -> Result<()> {
    if !(0.0..=100.0).contains(&lo) || !(0.0..=100.0).contains(&hi) || lo >= hi {
        return Err(invalid("clip_percentiles", format!("need 0 <= lo < hi <= 100, got ({lo}, {hi})")));
    }
    Ok(())
}

pub const EQUALIZE_BINS: usize = 256;

fn intensity_array(data: &Array4<f32>, lo: f64, hi: f64, equalize: bool) -> Result<Array4<f32>> {
    check_percentiles(lo, hi)?;
    let mut out = data.clone();
    for mut ch in out.axis_iter_mut(Axis(0)) {
        let mut sorted: Vec<f64> = ch.iter().map(|v| *v as f64).collect();
        sorted.sort_by(f64::total_cmp);
        let (a, b) = (percentile(&sorted, lo), percentile(&sorted, hi));
        ch.mapv_inplace(|v| (v as f64).clamp(a, b) as f32);
        if equalize {
            let min = ch.iter().copied().fold(f32::INFINITY, f32::min) as f64;
            let max = ch.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
            if max <= min {
                continue;
            }
            let bin = |v: f32| (((v as f64 - min) / (max - min) * EQUALIZE_BINS as f64) as usize).min(EQUALIZE_BINS - 1);
            let mut hist = [0usize; EQUALIZE_BINS];
            for v in ch.iter() {
                hist[bin(*v)] += 1;
            }
            let n = ch.len() as f64;
            let mut cdf = [0f64; EQUALIZE_BINS];
            let mut acc = 0usize;
            for (c, h) in cdf.iter_mut().zip(hist) {
                acc += h;
                *c = acc as f64 / n;
            }
            ch.mapv_inplace(|v| cdf[bin(v)] as f32);
        }
    }
    Ok(out)
}

/// Clamps intensities to the `[lo, hi]` percentile values, then optionally
/// maps them through the 256-bin empirical CDF.
pub fn intensity_adjust(volume: &Volume, clip_percentiles: (f64, f64), equalize: bool) -> Result<Volume> {
    let data = intensity_array(&volume.data, clip_percentiles.0, clip_percentiles.1, equalize)?;
    Ok(volume.with_data(data)?)
}

// ---------------------------------------------------------------- geometry

type Mat3 = [[f64; 3]; 3];

fn mat_vec(m: &Mat3, v: [f64; 3]) -> [f64; 3] {
    [0, 1, 2].map(|r| m[r][0] * v[0] + m[r][1] * v[1] + m[r][2] * v[2])
}

fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut m = [[0.0; 3]; 3];
    for r in 0..3 {
        for c in 0..3 {
            m[r][c] = (0..3).map(|k| a[r][k] * b[k][c]).sum();
        }
    }
    m
}

fn trilinear(ch: &ndarray::ArrayView3<f32>, p: [f64; 3], clamp: bool) -> f32 {
    let dims = ch.shape();
    let mut idx = [[0usize; 2]; 3];
    let mut w = [[0f64; 2]; 3];
    for a in 0..3 {
        let n = dims[a];
        let mut x = p[a];
        if clamp {
            x = x.clamp(0.0, (n - 1) as f64);
        } else if x < -1e-9 || x > (n - 1) as f64 + 1e-9 {
            return 0.0;
        }
        x = x.clamp(0.0, (n - 1) as f64);
        let i = (x.floor() as usize).min(n.saturating_sub(2));
        let t = if n == 1 { 0.0 } else { x - i as f64 };
        idx[a] = [i, (i + 1).min(n - 1)];
        w[a] = [1.0 - t, t];
    }
    let mut acc = 0.0;
    for (a, wa) in w[0].iter().enumerate() {
        for (b, wb) in w[1].iter().enumerate() {
            for (c, wc) in w[2].iter().enumerate() {
                let wt = wa * wb * wc;
                if wt != 0.0 {
                    acc += wt * ch[[idx[0][a], idx[1][b], idx[2][c]]] as f64;
                }
            }
        }
    }
    acc as f32
}

/// Pulls every output voxel from input position `map(out)`.
fn warp(data: &Array4<f32>, map: &dyn Fn([f64; 3]) -> [f64; 3], clamp: bool) -> Array4<f32> {
    let sh = data.shape();
    let mut out = Array4::<f32>::zeros((sh[0], sh[1], sh[2], sh[3]));
    for (c, ch) in data.axis_iter(Axis(0)).enumerate() {
        for i in 0..sh[1] {
            for j in 0..sh[2] {
                for k in 0..sh[3] {
                    let p = map([i as f64, j as f64, k as f64]);
                    out[[c, i, j, k]] = trilinear(&ch, p, clamp);
                }
            }
        }
    }
    out
}

fn warp_label(label: &Array4<f32>, map: &dyn Fn([f64; 3]) -> [f64; 3], clamp: bool) -> Array4<f32> {
    let binary = is_binary(label);
    let mut out = warp(label, map, clamp);
    if binary {
        out.mapv_inplace(|v| if v >= 0.5 { 1.0 } else { 0.0 });
    }
    out
}

fn warp_sample(sample: &mut Sample, scope: Scope, map: &dyn Fn([f64; 3]) -> [f64; 3], clamp: bool) {
    if scope.image() {
        sample.image = warp(&sample.image, map, clamp);
    }
    if scope.label() {
        if let Some(l) = &sample.label {
            sample.label = Some(warp_label(l, map, clamp));
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct AffineParams {
    angle_deg: f64,
    scale: f64,
    translation: [f64; 3],
}

/// Forward matrix `M = S R` (rotation in the plane of the first two axes)
/// and center; a point maps as `x' = M (x - c) + c + t`.
fn affine_matrix(p: &AffineParams, planar: bool) -> Mat3 {
    let (s, c) = p.angle_deg.to_radians().sin_cos();
    let r = [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]];
    let sz = if planar { 1.0 } else { p.scale };
    let sm = [[p.scale, 0.0, 0.0], [0.0, p.scale, 0.0], [0.0, 0.0, sz]];
    mat_mul(&sm, &r)
}

fn inverse_affine_matrix(p: &AffineParams, planar: bool) -> Mat3 {
    let (s, c) = p.angle_deg.to_radians().sin_cos();
    let rt = [[c, s, 0.0], [-s, c, 0.0], [0.0, 0.0, 1.0]];
    let sz = if planar { 1.0 } else { 1.0 / p.scale };
    let si = [[1.0 / p.scale, 0.0, 0.0], [0.0, 1.0 / p.scale, 0.0], [0.0, 0.0, sz]];
    mat_mul(&rt, &si)
}

fn grid_center(shape: [usize; 3]) -> [f64; 3] {
    shape.map(|n| (n as f64 - 1.0) / 2.0)
}

fn apply_affine_params(sample: &mut Sample, p: &AffineParams, scope: Scope, inverse: bool) {
    let shape = sample.shape3();
    let planar = shape[2] == 1;
    let c = grid_center(shape);
    let t = p.translation;
    if !inverse {
        // output x came from input M^-1 (x - c - t) + c
        let mi = inverse_affine_matrix(p, planar);
        let map = move |x: [f64; 3]| {
            let v = mat_vec(&mi, [x[0] - c[0] - t[0], x[1] - c[1] - t[1], x[2] - c[2] - t[2]]);
            [v[0] + c[0], v[1] + c[1], v[2] + c[2]]
        };
        warp_sample(sample, scope, &map, false);
    } else {
        let m = affine_matrix(p, planar);
        let map = move |x: [f64; 3]| {
            let v = mat_vec(&m, [x[0] - c[0], x[1] - c[1], x[2] - c[2]]);
            [v[0] + c[0] + t[0], v[1] + c[1] + t[1], v[2] + c[2] + t[2]]
        };
        warp_sample(sample, scope, &map, false);
    }
}

fn sample_range(rng: &mut ChaCha8Rng, r: [f64; 2]) -> f64 {
    if r[0] == r[1] {
        r[0]
    } else {
        rng.random_range(r[0]..r[1])
    }
}

/// Random in-plane rotation, isotropic scale and translation, linear
/// interpolation (binary labels are re-thresholded at 0.5).
pub fn affine_augment(
    sample: &Sample,
    rotation_deg: [f64; 2],
    scale: [f64; 2],
    translation_vox: [f64; 2],
    seed: u64,
    scope: Scope,
) -> Result<(Sample, TransformRecord)> {
    TransformKind::AffineAugment { rotation_deg, scale, translation_vox }.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let planar = sample.shape3()[2] == 1;
    let p = AffineParams {
        angle_deg: sample_range(&mut rng, rotation_deg),
        scale: sample_range(&mut rng, scale),
        translation: [
            sample_range(&mut rng, translation_vox),
            sample_range(&mut rng, translation_vox),
            if planar { 0.0 } else { sample_range(&mut rng, translation_vox) },
        ],
    };
    let mut out = sample.clone();
    let identity = p.angle_deg == 0.0 && p.scale == 1.0 && p.translation == [0.0; 3];
    if !identity {
        apply_affine_params(&mut out, &p, scope, false);
    }
    let rec = TransformRecord::new(
        "affine_augment",
        scope,
        true,
        json!({"rotation_deg": p.angle_deg, "scale": p.scale, "translation_vox": p.translation}),
    );
    Ok((out, rec))
}

/// Separable Gaussian smoothing with reflected borders, sigma in voxels.
fn gaussian_smooth(field: &mut Array3<f64>, sigma: [f64; 3]) {
    for (axis, sg) in sigma.iter().enumerate() {
        if *sg <= 0.0 || field.shape()[axis] == 1 {
            continue;
        }
        let radius = (3.0 * sg).ceil() as i64;
        let kernel: Vec<f64> = (-radius..=radius).map(|x| (-(x * x) as f64 / (2.0 * sg * sg)).exp()).collect();
        let norm: f64 = kernel.iter().sum();
        for mut lane in field.lanes_mut(Axis(axis)) {
            let src: Vec<f64> = lane.iter().copied().collect();
            let n = src.len();
            for (i, o) in lane.iter_mut().enumerate() {
                let mut acc = 0.0;
                for (k, w) in kernel.iter().enumerate() {
                    let j = i as i64 + k as i64 - radius;
                    acc += w * src[mirror(j, n)];
                }
                *o = acc / norm;
            }
        }
    }
}

/// Smoothed white-noise displacement (max magnitude `alpha` voxels) applied
/// to image and label alike.
pub fn elastic_augment(sample: &Sample, alpha: f64, sigma_mm: f64, seed: u64, scope: Scope) -> Result<(Sample, TransformRecord)> {
    TransformKind::ElasticAugment { alpha, sigma: sigma_mm }.validate()?;
    let rec = TransformRecord::new("elastic_augment", scope, false, json!({"alpha": alpha, "sigma": sigma_mm, "seed": seed}));
    if alpha == 0.0 {
        return Ok((sample.clone(), rec));
    }
    let shape = sample.shape3();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sigma_vox = [0, 1, 2].map(|a| sigma_mm / sample.spacing[a]);
    let mut fields = Vec::with_capacity(3);
    for dim in shape {
        let mut f = Array3::<f64>::from_shape_fn((shape[0], shape[1], shape[2]), |_| rng.random_range(-1.0..1.0));
        if dim == 1 {
            f.fill(0.0);
        } else {
            gaussian_smooth(&mut f, sigma_vox);
            let peak = f.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            if peak > 0.0 {
                f.mapv_inplace(|v| v / peak * alpha);
            }
        }
        fields.push(f);
    }
    let map = |x: [f64; 3]| {
        let idx = [x[0] as usize, x[1] as usize, x[2] as usize];
        [x[0] + fields[0][idx], x[1] + fields[1][idx], x[2] + fields[2][idx]]
    };
    let mut out = sample.clone();
    warp_sample(&mut out, scope, &map, true);
    Ok((out, rec))
}

/// Soft label decaying linearly with Euclidean distance (mm) from the
/// object, reaching zero at `dilation_mm`.
pub fn dilate_ground_truth(label: &Array4<f32>, spacing: [f64; 3], dilation_mm: f64) -> Result<Array4<f32>> {
    TransformKind::DilateGroundTruth { dilation_mm }.validate()?;
    if !is_binary(label) {
        return Err(TransformError::NonBinaryLabel("dilate_ground_truth".into()));
    }
    if dilation_mm == 0.0 {
        return Ok(label.clone());
    }
    let mut out = label.clone();
    for mut ch in out.axis_iter_mut(Axis(0)) {
        let mask = ch.map(|v| *v == 1.0);
        if !mask.iter().any(|m| *m) {
            continue;
        }
        let d2 = squared_edt(mask.view(), spacing);
        for (o, d) in ch.iter_mut().zip(d2.iter()) {
            *o = (1.0 - d.sqrt() / dilation_mm).max(0.0) as f32;
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------- pipeline

fn apply_one(sample: &mut Sample, spec: &TransformSpec, seed: u64) -> Result<TransformRecord> {
    let scope = spec.scope;
    let on = |s: &mut Sample, f: &dyn Fn(&Array4<f32>) -> Result<Array4<f32>>| -> Result<()> {
        if scope.image() {
            s.image = f(&s.image)?;
        }
        if scope.label() {
            if let Some(l) = &s.label {
                s.label = Some(f(l)?);
            }
        }
        Ok(())
    };
    match &spec.kind {
        TransformKind::Resample { spacing, order } => {
            check_spacing(*spacing)?;
            let from = sample.spacing;
            let original = sample.shape3();
            if scope.image() {
                sample.image = resample_array(&sample.image, from, *spacing, *order);
            }
            if scope.label() {
                if let Some(l) = &sample.label {
                    sample.label = Some(resample_array(l, from, *spacing, 0));
                }
            }
            sample.affine = rescaled_affine(&sample.affine, from, *spacing);
            sample.spacing = *spacing;
            Ok(TransformRecord::new("resample", scope, false, json!({"from": from, "to": spacing, "order": order, "original_shape": original})))
        }
        TransformKind::CropOrPad { shape, center } => {
            let original = sample.shape3();
            let start = crop_start(original, *shape, *center);
            on(sample, &|a| Ok(crop_pad_array(a, start, *shape)))?;
            sample.affine = shifted_affine(&sample.affine, start);
            Ok(crop_record(start, original, scope))
        }
        TransformKind::NormalizeZscore { nonzero_only } => {
            let (img, stats) = zscore_array(&sample.image, *nonzero_only)?;
            if scope.image() {
                sample.image = img;
            }
            let mut rec = TransformRecord::new("normalize_zscore", scope, true, json!({"mean_std": stats}));
            if scope.label() {
                rec.invertible = false;
                if let Some(l) = &sample.label {
                    sample.label = Some(zscore_array(l, *nonzero_only)?.0);
                }
            }
            Ok(rec)
        }
        TransformKind::IntensityAdjust { clip_percentiles, equalize } => {
            on(sample, &|a| intensity_array(a, clip_percentiles[0], clip_percentiles[1], *equalize))?;
            Ok(TransformRecord::new(
                "intensity_adjust",
                scope,
                false,
                json!({"clip_percentiles": clip_percentiles, "equalize": equalize}),
            ))
        }
        TransformKind::AffineAugment { rotation_deg, scale, translation_vox } => {
            let (out, rec) = affine_augment(sample, *rotation_deg, *scale, *translation_vox, seed, scope)?;
            *sample = out;
            Ok(rec)
        }
        TransformKind::ElasticAugment { alpha, sigma } => {
            let (out, rec) = elastic_augment(sample, *alpha, *sigma, seed, scope)?;
            *sample = out;
            Ok(rec)
        }
        TransformKind::DilateGroundTruth { dilation_mm } => {
            if let Some(l) = &sample.label {
                sample.label = Some(dilate_ground_truth(l, sample.spacing, *dilation_mm)?);
            }
            Ok(TransformRecord::new("dilate_ground_truth", Scope::Label, false, json!({"dilation_mm": dilation_mm})))
        }
    }
}

/// Applies `specs` in order. Each transform draws from its own stream
/// derived from `seed` and its position.
pub fn apply_pipeline(sample: &Sample, specs: &[TransformSpec], seed: u64) -> Result<(Sample, Vec<TransformRecord>)> {
    let mut out = sample.clone();
    let mut records = Vec::with_capacity(specs.len());
    for (k, spec) in specs.iter().enumerate() {
        let s = derive_seed(seed, spec.kind.name(), k);
        records.push(apply_one(&mut out, spec, s)?);
    }
    Ok((out, records))
}

/// Undoes `records` in reverse order; fails on the first one that cannot be
/// inverted.
pub fn invert_records(sample: &Sample, records: &[TransformRecord]) -> Result<Sample> {
    if let Some(r) = records.iter().find(|r| !r.invertible) {
        return Err(TransformError::NotInvertible(r.name.clone()));
    }
    let mut out = sample.clone();
    for rec in records.iter().rev() {
        match rec.name.as_str() {
            "crop_or_pad" => {
                let start: [i64; 3] = rec.get("start")?;
                let original: [usize; 3] = rec.get("original_shape")?;
                let back = start.map(|v| -v);
                let cur_affine = out.affine;
                let scope = rec.scope;
                if scope.image() {
                    out.image = crop_pad_array(&out.image, back, original);
                }
                if scope.label() {
                    if let Some(l) = &out.label {
                        out.label = Some(crop_pad_array(l, back, original));
                    }
                }
                out.affine = shifted_affine(&cur_affine, back);
            }
            "affine_augment" => {
                let p = AffineParams {
                    angle_deg: rec.get("rotation_deg")?,
                    scale: rec.get("scale")?,
                    translation: rec.get("translation_vox")?,
                };
                if !(p.angle_deg == 0.0 && p.scale == 1.0 && p.translation == [0.0; 3]) {
                    apply_affine_params(&mut out, &p, rec.scope, true);
                }
            }
            "normalize_zscore" => {
                let stats: Vec<(f64, f64)> = rec.get("mean_std")?;
                for (mut ch, (m, s)) in out.image.axis_iter_mut(Axis(0)).zip(stats) {
                    ch.mapv_inplace(|v| (v as f64 * s + m) as f32);
                }
            }
            other => return Err(TransformError::NotInvertible(other.to_string())),
        }
    }
    Ok(out)
}

/// Maps a prediction made on the preprocessed grid back onto the native
/// grid: crops are undone exactly, resampling by linear interpolation onto
/// the recorded source shape. Intensity records are skipped.
pub fn restore_native(map: &Array4<f32>, records: &[TransformRecord]) -> Result<Array4<f32>> {
    let mut cur = map.clone();
    for rec in records.iter().rev() {
        match rec.name.as_str() {
            "crop_or_pad" => {
                let start: [i64; 3] = rec.get("start")?;
                let original: [usize; 3] = rec.get("original_shape")?;
                cur = crop_pad_array(&cur, start.map(|v| -v), original);
            }
            "resample" => {
                let from: [f64; 3] = rec.get("from")?;
                let to: [f64; 3] = rec.get("to")?;
                let original: [usize; 3] = rec.get("original_shape")?;
                for ax in 0..3 {
                    if cur.shape()[ax + 1] != original[ax] || from[ax] != to[ax] {
                        cur = resample_axis(&cur, ax + 1, original[ax], from[ax] / to[ax], 1);
                    }
                }
            }
            "normalize_zscore" | "intensity_adjust" => {}
            other => return Err(TransformError::NotInvertible(other.to_string())),
        }
    }
    Ok(cur)
}

/// Geometric inverse only, for mapping predictions back to native space.
/// Intensity records are ignored.
pub fn invert_geometry(map: &Array4<f32>, records: &[TransformRecord]) -> Result<Array4<f32>> {
    let geometric: Vec<TransformRecord> = records.iter().filter(|r| r.name != "normalize_zscore").cloned().collect();
    let s = Sample {
        image: map.clone(),
        label: None,
        spacing: [1.0; 3],
        affine: crate::volume::IDENTITY_AFFINE,
    };
    let mut g = geometric;
    for r in g.iter_mut() {
        r.scope = Scope::Image;
    }
    Ok(invert_records(&s, &g)?.image)
}

#[cfg(test)]
mod tests;
