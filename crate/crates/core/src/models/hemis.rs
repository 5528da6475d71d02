//! Moment fusion across an arbitrary subset of modalities.

use super::ModelError;
use crate::nn::Tensor;

fn check(features: &[Tensor], availability: &[Vec<bool>]) -> Result<(), ModelError> {
    let first = features.first().ok_or_else(|| ModelError::Shape("no modality features".into()))?;
    if features.iter().any(|f| f.shape != first.shape) {
        return Err(ModelError::Shape("modality feature shapes differ".into()));
    }
    if availability.len() != first.n() {
        return Err(ModelError::Shape(format!(
            "availability has {} rows for a batch of {}",
            availability.len(),
            first.n()
        )));
    }
    for (n, row) in availability.iter().enumerate() {
        if row.len() != features.len() {
            return Err(ModelError::Shape(format!("availability row {n} has {} entries for {} modalities", row.len(), features.len())));
        }
        if !row.iter().any(|a| *a) {
            return Err(ModelError::NoModality(n));
        }
    }
    Ok(())
}

/// Concatenates the mean and population variance over available modalities.
///
/// `availability[n][m]` says whether modality `m` is present for sample `n`.
/// Values are sorted per voxel before accumulation, so any permutation of
/// the modalities yields bit-identical output.
pub fn hemis_fuse(features: &[Tensor], availability: &[Vec<bool>]) -> Result<Tensor, ModelError> {
    check(features, availability)?;
    let [n, c, d, h, w] = features[0].shape;
    let p = c * d * h * w;
    let mut out = Tensor::zeros([n, 2 * c, d, h, w]);
    let mut vals: Vec<f32> = Vec::with_capacity(features.len());
    for i in 0..n {
        let avail: Vec<&[f32]> = features.iter().zip(&availability[i]).filter(|(_, a)| **a).map(|(f, _)| f.sample(i)).collect();
        let k = avail.len() as f64;
        let dst = out.sample_mut(i);
        for j in 0..p {
            vals.clear();
            vals.extend(avail.iter().map(|f| f[j]));
            vals.sort_by(f32::total_cmp);
            let mean = vals.iter().map(|v| *v as f64).sum::<f64>() / k;
            let var = vals.iter().map(|v| (*v as f64 - mean).powi(2)).sum::<f64>() / k;
            dst[j] = mean as f32;
            dst[p + j] = var as f32;
        }
    }
    Ok(out)
}

/// Gradient of [`hemis_fuse`] with respect to each modality's features.
pub fn hemis_fuse_backward(features: &[Tensor], availability: &[Vec<bool>], dout: &Tensor) -> Vec<Tensor> {
    let [n, c, d, h, w] = features[0].shape;
    let p = c * d * h * w;
    let mut grads: Vec<Tensor> = features.iter().map(|f| Tensor::zeros(f.shape)).collect();
    for i in 0..n {
        let idx: Vec<usize> = (0..features.len()).filter(|m| availability[i][*m]).collect();
        let k = idx.len() as f32;
        let g = dout.sample(i);
        for j in 0..p {
            let mean = idx.iter().map(|m| features[*m].sample(i)[j] as f64).sum::<f64>() as f32 / k;
            for m in &idx {
                let x = features[*m].sample(i)[j];
                grads[*m].sample_mut(i)[j] = g[j] / k + g[p + j] * 2.0 * (x - mean) / k;
            }
        }
    }
    grads
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(vals: Vec<f32>) -> Tensor {
        Tensor::from_vec([1, 1, 1, 1, vals.len()], vals)
    }

    #[test]
    fn single_modality_mean_and_zero_variance() {
        let a = t(vec![1.5, -2.0]);
        let out = hemis_fuse(&[a.clone(), t(vec![9.0, 9.0])], &[vec![true, false]]).unwrap();
        assert_eq!(out.data, vec![1.5, -2.0, 0.0, 0.0]);
    }

    #[test]
    fn two_modalities_arithmetic() {
        let out = hemis_fuse(&[t(vec![1.0]), t(vec![3.0])], &[vec![true, true]]).unwrap();
        assert_eq!(out.data, vec![2.0, 1.0]);
    }

    #[test]
    fn permutation_is_bit_identical() {
        let a = t(vec![0.1, 0.7, -3.3]);
        let b = t(vec![1e-3, 2.9, 0.333]);
        let c = t(vec![7.77, -0.01, 1.0 / 3.0]);
        let fwd = hemis_fuse(&[a.clone(), b.clone(), c.clone()], &[vec![true; 3]]).unwrap();
        let rev = hemis_fuse(&[c, a, b], &[vec![true; 3]]).unwrap();
        assert_eq!(fwd.data, rev.data);
    }

    #[test]
    fn no_available_modality_is_an_error() {
        assert!(matches!(hemis_fuse(&[t(vec![1.0])], &[vec![false]]), Err(ModelError::NoModality(0))));
    }

    #[test]
    fn backward_matches_finite_difference() {
        let feats = vec![t(vec![0.3, -1.0]), t(vec![1.2, 0.5]), t(vec![-0.4, 2.0])];
        let avail = vec![vec![true, false, true]];
        let w = Tensor::from_vec([1, 2, 1, 1, 2], vec![0.7, -0.2, 1.3, 0.4]);
        let grads = hemis_fuse_backward(&feats, &avail, &w);
        let f = |feats: &[Tensor]| -> f64 {
            let o = hemis_fuse(feats, &avail).unwrap();
            o.data.iter().zip(&w.data).map(|(a, b)| (*a as f64) * (*b as f64)).sum()
        };
        let h = 1e-3f32;
        for m in 0..3 {
            for j in 0..2 {
                let mut p = feats.clone();
                p[m].data[j] += h;
                let mut q = feats.clone();
                q[m].data[j] -= h;
                let fd = (f(&p) - f(&q)) / (2.0 * h as f64);
                assert!((fd - grads[m].data[j] as f64).abs() < 1e-3, "m {m} j {j}: {fd} vs {}", grads[m].data[j]);
            }
        }
    }
}
