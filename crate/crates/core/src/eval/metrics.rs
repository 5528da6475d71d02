use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{Array3, ArrayView3, Axis};
use serde::{Deserialize, Serialize};

use super::components::label_components;
use super::EvalError;
use crate::distance::squared_edt;
use crate::volume::Volume;

/// Fraction of a ground-truth component that must be covered for it to
/// count as detected.
pub const LESION_OVERLAP: f64 = 0.25;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub subject_id: String,
    pub class_index: usize,
    /// `None` for unbinned rows, else index into the bin list.
    pub bin: Option<usize>,
    pub bin_label: String,
    pub dice: f64,
    pub precision: f64,
    pub recall: f64,
    pub specificity: f64,
    pub hausdorff_mm: f64,
    pub abs_volume_diff_mm3: f64,
    pub rel_volume_error: f64,
    pub lesion_tp: usize,
    pub lesion_fp: usize,
    pub lesion_fn: usize,
}

pub const REPORT_HEADER: [&str; 13] = [
    "subject_id",
    "class",
    "bin",
    "dice",
    "precision",
    "recall",
    "specificity",
    "hausdorff_mm",
    "abs_volume_diff_mm3",
    "rel_volume_error",
    "lesion_tp",
    "lesion_fp",
    "lesion_fn",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

impl Confusion {
    pub fn of(pred: ArrayView3<bool>, gt: ArrayView3<bool>) -> Self {
        let mut c = Confusion::default();
        for (p, g) in pred.iter().zip(gt.iter()) {
            match (*p, *g) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        c
    }

    /// 1 when both masks are empty.
    pub fn dice(&self) -> f64 {
        let denom = 2 * self.tp + self.fp + self.fn_;
        if denom == 0 {
            1.0
        } else {
            2.0 * self.tp as f64 / denom as f64
        }
    }

    /// Empty prediction: 1 if the truth is empty too, else 0.
    pub fn precision(&self) -> f64 {
        match self.tp + self.fp {
            0 if self.fn_ == 0 => 1.0,
            0 => 0.0,
            d => self.tp as f64 / d as f64,
        }
    }

    pub fn recall(&self) -> f64 {
        match self.tp + self.fn_ {
            0 => 1.0,
            d => self.tp as f64 / d as f64,
        }
    }

    pub fn specificity(&self) -> f64 {
        match self.tn + self.fp {
            0 => 1.0,
            d => self.tn as f64 / d as f64,
        }
    }

    pub fn tpr_fpr(&self) -> (f64, f64) {
        let tpr = if self.tp + self.fn_ == 0 { 0.0 } else { self.tp as f64 / (self.tp + self.fn_) as f64 };
        let fpr = if self.fp + self.tn == 0 { 0.0 } else { self.fp as f64 / (self.fp + self.tn) as f64 };
        (tpr, fpr)
    }
}

/// Foreground voxels with a 6-neighbour outside the mask. Leaving the grid
/// counts as outside except along singleton axes.
pub fn surface(mask: ArrayView3<bool>) -> Array3<bool> {
    let dims = mask.dim();
    let dims = [dims.0, dims.1, dims.2];
    Array3::from_shape_fn(mask.dim(), |(i, j, k)| {
        if !mask[[i, j, k]] {
            return false;
        }
        let p = [i, j, k];
        for a in 0..3 {
            if dims[a] == 1 {
                continue;
            }
            for d in [-1i64, 1] {
                let q = p[a] as i64 + d;
                if q < 0 || q >= dims[a] as i64 {
                    return true;
                }
                let mut n = p;
                n[a] = q as usize;
                if !mask[n] {
                    return true;
                }
            }
        }
        false
    })
}

/// Symmetric Hausdorff distance between mask surfaces in mm. 0 when both
/// are empty, NaN when exactly one is.
pub fn hausdorff_mm(pred: ArrayView3<bool>, gt: ArrayView3<bool>, spacing: [f64; 3]) -> f64 {
    let sp = surface(pred);
    let sg = surface(gt);
    let (np, ng) = (sp.iter().any(|v| *v), sg.iter().any(|v| *v));
    match (np, ng) {
        (false, false) => return 0.0,
        (true, false) | (false, true) => return f64::NAN,
        _ => {}
    }
    let directed = |from: &Array3<bool>, to: &Array3<bool>| -> f64 {
        let d2 = squared_edt(to.view(), spacing);
        from.iter().zip(d2.iter()).filter(|(f, _)| **f).map(|(_, d)| *d).fold(0.0, f64::max)
    };
    directed(&sp, &sg).max(directed(&sg, &sp)).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct LesionCounts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

/// Component-level detection counts with the overlap rule above.
pub fn lesion_counts(pred: ArrayView3<bool>, gt: ArrayView3<bool>) -> LesionCounts {
    let (gl, gs) = label_components(gt);
    let (pl, ps) = label_components(pred);
    let mut covered = vec![0usize; gs.len()];
    let mut pred_hits = vec![false; ps.len()];
    for ((g, p), pm) in gl.iter().zip(pl.iter()).zip(pred.iter()) {
        if *g > 0 && *pm {
            covered[*g as usize - 1] += 1;
        }
        if *g > 0 && *p > 0 {
            pred_hits[*p as usize - 1] = true;
        }
    }
    let mut c = LesionCounts::default();
    for (cov, size) in covered.iter().zip(&gs) {
        if *cov as f64 / *size as f64 >= LESION_OVERLAP {
            c.tp += 1;
        } else {
            c.fn_ += 1;
        }
    }
    c.fp = pred_hits.iter().filter(|h| !**h).count();
    c
}

fn check_geometry(pred: &Volume, gt: &Volume) -> Result<(), EvalError> {
    if pred.shape3() != gt.shape3() || pred.channels() != gt.channels() {
        return Err(EvalError::Geometry(format!(
            "prediction {:?}x{} vs ground truth {:?}x{}",
            pred.shape3(),
            pred.channels(),
            gt.shape3(),
            gt.channels()
        )));
    }
    Ok(())
}

fn binary(v: &Volume, c: usize) -> Array3<bool> {
    v.data.index_axis(Axis(0), c).map(|x| *x >= 0.5)
}

pub(crate) fn row_for(subject: &str, class: usize, pred: ArrayView3<bool>, gt: ArrayView3<bool>, spacing: [f64; 3]) -> EvalRow {
    let conf = Confusion::of(pred, gt);
    let vox = spacing.iter().product::<f64>();
    let (np, ng) = ((conf.tp + conf.fp) as f64, (conf.tp + conf.fn_) as f64);
    let les = lesion_counts(pred, gt);
    EvalRow {
        subject_id: subject.to_string(),
        class_index: class,
        bin: None,
        bin_label: "all".into(),
        dice: conf.dice(),
        precision: conf.precision(),
        recall: conf.recall(),
        specificity: conf.specificity(),
        hausdorff_mm: hausdorff_mm(pred, gt, spacing),
        abs_volume_diff_mm3: (np - ng).abs() * vox,
        rel_volume_error: if ng == 0.0 { f64::NAN } else { (np - ng) / ng },
        lesion_tp: les.tp,
        lesion_fp: les.fp,
        lesion_fn: les.fn_,
    }
}

/// One row per class channel. Inputs are binarized at 0.5.
pub fn compute_metrics(subject: &str, pred: &Volume, gt: &Volume) -> Result<Vec<EvalRow>, EvalError> {
    check_geometry(pred, gt)?;
    Ok((0..pred.channels())
        .map(|c| row_for(subject, c, binary(pred, c).view(), binary(gt, c).view(), gt.spacing))
        .collect())
}

fn bin_label(bins: &[f64], b: usize) -> String {
    let lo = if b == 0 { 0.0 } else { bins[b - 1] };
    match bins.get(b) {
        Some(hi) => format!("[{lo},{hi})"),
        None => format!("[{lo},inf)"),
    }
}

fn bin_of(bins: &[f64], volume: f64) -> usize {
    bins.iter().take_while(|e| volume >= **e).count()
}

/// Rows per class and size bin. Edges `b1 < … < bk` give bins
/// `[0,b1) … [bk,inf)`; ground-truth components are binned by volume and
/// false-positive prediction components by their own volume.
pub fn size_binned_metrics(subject: &str, pred: &Volume, gt: &Volume, bins_mm3: &[f64]) -> Result<Vec<EvalRow>, EvalError> {
    check_geometry(pred, gt)?;
    if bins_mm3.windows(2).any(|w| w[0] >= w[1]) || bins_mm3.iter().any(|b| !b.is_finite() || *b <= 0.0) {
        return Err(EvalError::InvalidParam(format!("bins {bins_mm3:?} must be positive and strictly increasing")));
    }
    let vox = gt.spacing.iter().product::<f64>();
    let mut rows = Vec::new();
    for c in 0..pred.channels() {
        let (p, g) = (binary(pred, c), binary(gt, c));
        let (gl, gs) = label_components(g.view());
        let (pl, ps) = label_components(p.view());
        let g_bin: Vec<usize> = gs.iter().map(|s| bin_of(bins_mm3, *s as f64 * vox)).collect();
        // which bins each predicted component touches through gt overlap
        let mut p_touch: Vec<Vec<usize>> = vec![Vec::new(); ps.len()];
        for (gv, pv) in gl.iter().zip(pl.iter()) {
            if *gv > 0 && *pv > 0 {
                let b = g_bin[*gv as usize - 1];
                let t = &mut p_touch[*pv as usize - 1];
                if !t.contains(&b) {
                    t.push(b);
                }
            }
        }
        for b in 0..=bins_mm3.len() {
            let in_region = |gv: u32, pv: u32| -> bool {
                (gv > 0 && g_bin[gv as usize - 1] == b)
                    || (pv > 0 && {
                        let t = &p_touch[pv as usize - 1];
                        t.contains(&b) || (t.is_empty() && bin_of(bins_mm3, ps[pv as usize - 1] as f64 * vox) == b)
                    })
            };
            let mut region = Array3::<bool>::from_elem(g.dim(), false);
            for ((r, gv), pv) in region.iter_mut().zip(gl.iter()).zip(pl.iter()) {
                *r = in_region(*gv, *pv);
            }
            let pr = Array3::from_shape_fn(p.dim(), |ix| p[ix] && region[ix]);
            let gr = Array3::from_shape_fn(g.dim(), |ix| g[ix] && region[ix]);
            let mut row = row_for(subject, c, pr.view(), gr.view(), gt.spacing);
            row.bin = Some(b);
            row.bin_label = bin_label(bins_mm3, b);
            rows.push(row);
        }
    }
    Ok(rows)
}

/// `%.6g`-style formatting.
pub fn format_sig6(x: f64) -> String {
    if x.is_nan() {
        return "nan".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if x == 0.0 {
        return "0".into();
    }
    let exp = x.abs().log10().floor() as i32;
    let sci = format!("{x:.5e}");
    // rounding may bump the exponent, e.g. 9.999995 -> 1.00000e1
    let exp = sci.rsplit('e').next().and_then(|e| e.parse::<i32>().ok()).unwrap_or(exp);
    if (-4..6).contains(&exp) {
        let decimals = (5 - exp).max(0) as usize;
        let s = format!("{x:.decimals$}");
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s
        }
    } else {
        let (mant, e) = sci.split_once('e').unwrap();
        let mant = if mant.contains('.') { mant.trim_end_matches('0').trim_end_matches('.') } else { mant };
        let e: i32 = e.parse().unwrap();
        format!("{mant}e{}{:02}", if e < 0 { '-' } else { '+' }, e.abs())
    }
}

/// Writes rows sorted by (subject, class, bin) under [`REPORT_HEADER`].
pub fn write_report(rows: &[EvalRow], path: &Path) -> Result<(), EvalError> {
    let mut sorted: Vec<&EvalRow> = rows.iter().collect();
    sorted.sort_by(|a, b| (&a.subject_id, a.class_index, a.bin.map(|v| v + 1).unwrap_or(0)).cmp(&(&b.subject_id, b.class_index, b.bin.map(|v| v + 1).unwrap_or(0))));
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(REPORT_HEADER).map_err(|e| EvalError::Io(e.to_string()))?;
    for r in sorted {
        w.write_record([
            r.subject_id.clone(),
            r.class_index.to_string(),
            r.bin_label.clone(),
            format_sig6(r.dice),
            format_sig6(r.precision),
            format_sig6(r.recall),
            format_sig6(r.specificity),
            format_sig6(r.hausdorff_mm),
            format_sig6(r.abs_volume_diff_mm3),
            format_sig6(r.rel_volume_error),
            r.lesion_tp.to_string(),
            r.lesion_fp.to_string(),
            r.lesion_fn.to_string(),
        ])
        .map_err(|e| EvalError::Io(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| EvalError::Io(e.to_string()))?;
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| EvalError::Io(format!("{}: {e}", parent.display())))?;
    }
    let mut f = fs::File::create(path).map_err(|e| EvalError::Io(format!("{}: {e}", path.display())))?;
    f.write_all(&bytes).map_err(|e| EvalError::Io(format!("{}: {e}", path.display())))?;
    Ok(())
}

/// Mean Dice over unbinned rows, skipping NaN.
pub fn mean_dice(rows: &[EvalRow]) -> f64 {
    let v: Vec<f64> = rows.iter().filter(|r| r.bin.is_none()).map(|r| r.dice).filter(|d| !d.is_nan()).collect();
    if v.is_empty() {
        f64::NAN
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}
