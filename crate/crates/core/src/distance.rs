//! Exact Euclidean distance transform on anisotropic grids.

use ndarray::{Array3, ArrayView3, Axis};

/// 1D squared distance transform of `f` with grid step weight `w` (step²),
/// lower envelope of parabolas.
fn edt_1d(f: &[f64], w: f64, out: &mut [f64]) {
    let n = f.len();
    let sites: Vec<usize> = (0..n).filter(|&i| f[i].is_finite()).collect();
    if sites.is_empty() {
        out.iter_mut().for_each(|o| *o = f64::INFINITY);
        return;
    }
    let mut v: Vec<usize> = Vec::with_capacity(sites.len());
    let mut z: Vec<f64> = Vec::with_capacity(sites.len() + 1);
    let inter = |q: usize, p: usize| -> f64 {
        let (qf, pf) = (q as f64, p as f64);
        ((f[q] + w * qf * qf) - (f[p] + w * pf * pf)) / (2.0 * w * (qf - pf))
    };
    for &q in &sites {
        while let Some(&p) = v.last() {
            let s = inter(q, p);
            if s <= *z.last().unwrap() {
                v.pop();
                z.pop();
            } else {
                break;
            }
        }
        if v.is_empty() {
            v.push(q);
            z.push(f64::NEG_INFINITY);
        } else {
            let s = inter(q, *v.last().unwrap());
            v.push(q);
            z.push(s);
        }
    }
    z.push(f64::INFINITY);
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        *o = w * d * d + f[v[k]];
    }
}

/// Squared distance (in mm²) from every voxel to the nearest `true` voxel.
/// All-false masks give infinity everywhere.
pub fn squared_edt(mask: ArrayView3<bool>, spacing: [f64; 3]) -> Array3<f64> {
    let mut d = mask.map(|&m| if m { 0.0 } else { f64::INFINITY });
    for (axis, sp) in spacing.iter().enumerate() {
        let w = sp * sp;
        for mut lane in d.lanes_mut(Axis(axis)) {
            let f: Vec<f64> = lane.iter().copied().collect();
            let mut out = vec![0.0; f.len()];
            edt_1d(&f, w, &mut out);
            for (l, o) in lane.iter_mut().zip(out) {
                *l = o;
            }
        }
    }
    d
}
