use serde::{Deserialize, Serialize};

/// Dense `(N, C, D, H, W)` float tensor. Two-dimensional data uses `D = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: [usize; 5],
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(shape: [usize; 5]) -> Self {
        Self {
            shape,
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: [usize; 5], data: Vec<f32>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "tensor shape/data mismatch");
        Self { shape, data }
    }

    pub fn n(&self) -> usize {
        self.shape[0]
    }

    pub fn c(&self) -> usize {
        self.shape[1]
    }

    pub fn spatial(&self) -> [usize; 3] {
        [self.shape[2], self.shape[3], self.shape[4]]
    }

    pub fn voxels(&self) -> usize {
        self.shape[2] * self.shape[3] * self.shape[4]
    }

    pub fn sample(&self, n: usize) -> &[f32] {
        let len = self.shape[1] * self.voxels();
        &self.data[n * len..(n + 1) * len]
    }

    pub fn sample_mut(&mut self, n: usize) -> &mut [f32] {
        let len = self.shape[1] * self.voxels();
        &mut self.data[n * len..(n + 1) * len]
    }

    /// Concatenates along channels.
    pub fn concat(a: &Tensor, b: &Tensor) -> Tensor {
        assert_eq!(a.n(), b.n());
        assert_eq!(a.spatial(), b.spatial());
        let mut out = Tensor::zeros([a.n(), a.c() + b.c(), a.shape[2], a.shape[3], a.shape[4]]);
        let (la, lb) = (a.c() * a.voxels(), b.c() * b.voxels());
        for n in 0..a.n() {
            let dst = out.sample_mut(n);
            dst[..la].copy_from_slice(a.sample(n));
            dst[la..la + lb].copy_from_slice(b.sample(n));
        }
        out
    }

    /// Splits along channels, inverse of [`Tensor::concat`].
    pub fn split(&self, first_channels: usize) -> (Tensor, Tensor) {
        let [n, c, d, h, w] = self.shape;
        let mut a = Tensor::zeros([n, first_channels, d, h, w]);
        let mut b = Tensor::zeros([n, c - first_channels, d, h, w]);
        let la = first_channels * self.voxels();
        for i in 0..n {
            let src = self.sample(i);
            a.sample_mut(i).copy_from_slice(&src[..la]);
            b.sample_mut(i).copy_from_slice(&src[la..]);
        }
        (a, b)
    }

    /// Selects one channel as a single-channel tensor.
    pub fn channel(&self, c: usize) -> Tensor {
        let [n, _, d, h, w] = self.shape;
        let v = self.voxels();
        let mut out = Tensor::zeros([n, 1, d, h, w]);
        for i in 0..n {
            out.sample_mut(i).copy_from_slice(&self.sample(i)[c * v..(c + 1) * v]);
        }
        out
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }
}

/// Trainable weights and their accumulated gradient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub shape: Vec<usize>,
    pub value: Vec<f32>,
    #[serde(skip)]
    pub grad: Vec<f32>,
    #[serde(skip)]
    pub frozen: bool,
}

impl Param {
    pub fn new(shape: Vec<usize>, value: Vec<f32>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), value.len());
        let grad = vec![0.0; value.len()];
        Self {
            shape,
            value,
            grad,
            frozen: false,
        }
    }

    pub fn filled(shape: Vec<usize>, v: f32) -> Self {
        let n = shape.iter().product();
        Self::new(shape, vec![v; n])
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }
}

/// Anything owning named parameters, visited in a fixed order.
pub trait Parameterized {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param));

    fn param_count(&mut self) -> usize {
        let mut n = 0;
        self.visit_params("", &mut |_, p| n += p.len());
        n
    }

    fn zero_grad(&mut self) {
        self.visit_params("", &mut |_, p| p.zero_grad());
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Row-major `C = op(A) · op(B) + beta · C` where `op(A)` is `m×k` and
/// `op(B)` is `k×n`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(m: usize, k: usize, n: usize, a: &[f32], a_t: bool, b: &[f32], b_t: bool, beta: f32, c: &mut [f32]) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: slice lengths were checked against the stated dimensions and
    // strides describe in-bounds row-major layouts.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(m: usize, k: usize, n: usize, a: &[f32], b: &[f32]) -> Vec<f32> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                c[i * n + j] = (0..k).map(|l| a[i * k + l] * b[l * n + j]).sum();
            }
        }
        c
    }

    fn transpose(r: usize, c: usize, a: &[f32]) -> Vec<f32> {
        let mut t = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                t[j * r + i] = a[i * c + j];
            }
        }
        t
    }

    #[test]
    fn gemm_matches_naive_in_all_transpose_modes() {
        let (m, k, n) = (3, 4, 5);
        let a: Vec<f32> = (0..m * k).map(|i| i as f32 * 0.5 - 2.0).collect();
        let b: Vec<f32> = (0..k * n).map(|i| (i % 7) as f32 - 3.0).collect();
        let want = naive(m, k, n, &a, &b);
        let at = transpose(m, k, &a);
        let bt = transpose(k, n, &b);
        for (aa, atf, bb, btf) in [(&a, false, &b, false), (&at, true, &b, false), (&a, false, &bt, true), (&at, true, &bt, true)] {
            let mut c = vec![0.0; m * n];
            gemm(m, k, n, aa, atf, bb, btf, 0.0, &mut c);
            assert_eq!(c, want);
        }
    }

    #[test]
    fn concat_split_inverse() {
        let a = Tensor::from_vec([2, 1, 1, 1, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let b = Tensor::from_vec([2, 2, 1, 1, 2], (0..8).map(|v| v as f32).collect());
        let c = Tensor::concat(&a, &b);
        assert_eq!(c.sample(1), &[3.0, 4.0, 4.0, 5.0, 6.0, 7.0]);
        let (a2, b2) = c.split(1);
        assert_eq!(a2, a);
        assert_eq!(b2, b);
    }
}
