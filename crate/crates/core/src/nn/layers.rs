//! Layers with explicit forward/backward passes.
//!
//! Every layer caches what its backward pass needs during a training
//! forward call; `backward` consumes the cache, accumulates parameter
//! gradients and returns the gradient with respect to the layer input.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::tensor::{gemm, join, Param, Parameterized, Tensor};

fn he_normal<R: Rng>(rng: &mut R, fan_in: usize, n: usize) -> Vec<f32> {
    let std = (2.0 / fan_in as f64).sqrt();
    let dist = Normal::new(0.0, std).unwrap();
    (0..n).map(|_| dist.sample(rng) as f32).collect()
}

fn kvol(k: [usize; 3]) -> usize {
    k[0] * k[1] * k[2]
}

/// Unfolds a `(cin, D, H, W)` sample into `(cin·kvol, D·H·W)` columns for a
/// stride-1 "same" convolution.
fn im2col(x: &[f32], cin: usize, dims: [usize; 3], k: [usize; 3], col: &mut [f32]) {
    let [d, h, w] = dims;
    let p = d * h * w;
    let pad = [k[0] / 2, k[1] / 2, k[2] / 2];
    let mut row = 0;
    for ci in 0..cin {
        let xc = &x[ci * p..(ci + 1) * p];
        for kz in 0..k[0] {
            for ky in 0..k[1] {
                for kx in 0..k[2] {
                    let dst = &mut col[row * p..(row + 1) * p];
                    let (oz, oy, ox) = (kz as isize - pad[0] as isize, ky as isize - pad[1] as isize, kx as isize - pad[2] as isize);
                    let x_lo = (-ox).max(0) as usize;
                    let x_hi = (w as isize - ox).min(w as isize).max(0) as usize;
                    for z in 0..d {
                        let sz = z as isize + oz;
                        for y in 0..h {
                            let sy = y as isize + oy;
                            let seg = &mut dst[(z * h + y) * w..(z * h + y + 1) * w];
                            if sz < 0 || sz >= d as isize || sy < 0 || sy >= h as isize || x_lo >= x_hi {
                                seg.iter_mut().for_each(|v| *v = 0.0);
                                continue;
                            }
                            let base = (sz as usize * h + sy as usize) * w;
                            seg[..x_lo].iter_mut().for_each(|v| *v = 0.0);
                            let src_lo = (x_lo as isize + ox) as usize;
                            seg[x_lo..x_hi].copy_from_slice(&xc[base + src_lo..base + src_lo + (x_hi - x_lo)]);
                            seg[x_hi..].iter_mut().for_each(|v| *v = 0.0);
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates columns back into `dx`.
fn col2im(col: &[f32], cin: usize, dims: [usize; 3], k: [usize; 3], dx: &mut [f32]) {
    let [d, h, w] = dims;
    let p = d * h * w;
    let pad = [k[0] / 2, k[1] / 2, k[2] / 2];
    let mut row = 0;
    for ci in 0..cin {
        let xc = &mut dx[ci * p..(ci + 1) * p];
        for kz in 0..k[0] {
            for ky in 0..k[1] {
                for kx in 0..k[2] {
                    let src = &col[row * p..(row + 1) * p];
                    let (oz, oy, ox) = (kz as isize - pad[0] as isize, ky as isize - pad[1] as isize, kx as isize - pad[2] as isize);
                    let x_lo = (-ox).max(0) as usize;
                    let x_hi = (w as isize - ox).min(w as isize).max(0) as usize;
                    for z in 0..d {
                        let sz = z as isize + oz;
                        if sz < 0 || sz >= d as isize {
                            continue;
                        }
                        for y in 0..h {
                            let sy = y as isize + oy;
                            if sy < 0 || sy >= h as isize || x_lo >= x_hi {
                                continue;
                            }
                            let base = (sz as usize * h + sy as usize) * w;
                            let seg = &src[(z * h + y) * w..(z * h + y + 1) * w];
                            let src_lo = (x_lo as isize + ox) as usize;
                            for (t, s) in xc[base + src_lo..base + src_lo + (x_hi - x_lo)].iter_mut().zip(&seg[x_lo..x_hi]) {
                                *t += *s;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Stride-1 convolution with zero "same" padding.
#[derive(Debug, Clone)]
pub struct Conv {
    pub weight: Param,
    pub bias: Option<Param>,
    pub cin: usize,
    pub cout: usize,
    pub kernel: [usize; 3],
    input: Option<Tensor>,
}

impl Conv {
    pub fn new<R: Rng>(rng: &mut R, cin: usize, cout: usize, kernel: [usize; 3], bias: bool) -> Self {
        let fan_in = cin * kvol(kernel);
        let weight = Param::new(vec![cout, cin, kernel[0], kernel[1], kernel[2]], he_normal(rng, fan_in, cout * fan_in));
        Self {
            weight,
            bias: bias.then(|| Param::filled(vec![cout], 0.0)),
            cin,
            cout,
            kernel,
            input: None,
        }
    }

    fn pointwise(&self) -> bool {
        self.kernel == [1, 1, 1]
    }

    pub fn forward(&mut self, x: &Tensor, cache: bool) -> Tensor {
        assert_eq!(x.c(), self.cin, "conv input channels");
        let [n, _, d, h, w] = x.shape;
        let p = d * h * w;
        let kk = self.cin * kvol(self.kernel);
        let mut out = Tensor::zeros([n, self.cout, d, h, w]);
        let mut col = if self.pointwise() { Vec::new() } else { vec![0.0; kk * p] };
        for i in 0..n {
            let xs = x.sample(i);
            let b: &[f32] = if self.pointwise() {
                xs
            } else {
                im2col(xs, self.cin, [d, h, w], self.kernel, &mut col);
                &col
            };
            let ys = out.sample_mut(i);
            if let Some(bias) = &self.bias {
                for (co, bv) in bias.value.iter().enumerate() {
                    ys[co * p..(co + 1) * p].iter_mut().for_each(|v| *v = *bv);
                }
            }
            gemm(self.cout, kk, p, &self.weight.value, false, b, false, 1.0, ys);
        }
        self.input = cache.then(|| x.clone());
        out
    }

    pub fn backward(&mut self, dy: &Tensor) -> Tensor {
        let x = self.input.take().expect("conv backward without cached forward");
        let [n, _, d, h, w] = x.shape;
        let p = d * h * w;
        let kk = self.cin * kvol(self.kernel);
        let mut dx = Tensor::zeros(x.shape);
        let mut col = if self.pointwise() { Vec::new() } else { vec![0.0; kk * p] };
        let mut dcol = vec![0.0; kk * p];
        for i in 0..n {
            let dys = dy.sample(i);
            if let Some(bias) = &mut self.bias {
                for (co, g) in bias.grad.iter_mut().enumerate() {
                    *g += dys[co * p..(co + 1) * p].iter().sum::<f32>();
                }
            }
            let xs = x.sample(i);
            let b: &[f32] = if self.pointwise() {
                xs
            } else {
                im2col(xs, self.cin, [d, h, w], self.kernel, &mut col);
                &col
            };
            // dW += dY · colᵀ
            gemm(self.cout, p, kk, dys, false, b, true, 1.0, &mut self.weight.grad);
            if self.pointwise() {
                gemm(kk, self.cout, p, &self.weight.value, true, dys, false, 0.0, dx.sample_mut(i));
            } else {
                gemm(kk, self.cout, p, &self.weight.value, true, dys, false, 0.0, &mut dcol);
                col2im(&dcol, self.cin, [d, h, w], self.kernel, dx.sample_mut(i));
            }
        }
        dx
    }
}

impl Parameterized for Conv {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(&join(prefix, "bias"), b);
        }
    }
}

/// `(c, D, H, W)` → `(c·fvol, D/fd · H/fh · W/fw)`, row index `(c, a, b, e)`.
fn space_to_depth(x: &[f32], c: usize, dims: [usize; 3], f: [usize; 3], out: &mut [f32]) {
    let [d, h, w] = dims;
    let (od, oh, ow) = (d / f[0], h / f[1], w / f[2]);
    let po = od * oh * ow;
    let mut row = 0;
    for ci in 0..c {
        for a in 0..f[0] {
            for b in 0..f[1] {
                for e in 0..f[2] {
                    let dst = &mut out[row * po..(row + 1) * po];
                    for z in 0..od {
                        for y in 0..oh {
                            let src = ((ci * d + z * f[0] + a) * h + y * f[1] + b) * w + e;
                            let line = &mut dst[(z * oh + y) * ow..(z * oh + y + 1) * ow];
                            for (xx, v) in line.iter_mut().enumerate() {
                                *v = x[src + xx * f[2]];
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Exact inverse layout of [`space_to_depth`]; `accumulate` adds instead of
/// overwriting.
fn depth_to_space(cols: &[f32], c: usize, dims: [usize; 3], f: [usize; 3], out: &mut [f32], accumulate: bool) {
    let [d, h, w] = dims;
    let (od, oh, ow) = (d / f[0], h / f[1], w / f[2]);
    let po = od * oh * ow;
    let mut row = 0;
    for ci in 0..c {
        for a in 0..f[0] {
            for b in 0..f[1] {
                for e in 0..f[2] {
                    let src = &cols[row * po..(row + 1) * po];
                    for z in 0..od {
                        for y in 0..oh {
                            let dst = ((ci * d + z * f[0] + a) * h + y * f[1] + b) * w + e;
                            let line = &src[(z * oh + y) * ow..(z * oh + y + 1) * ow];
                            for (xx, v) in line.iter().enumerate() {
                                if accumulate {
                                    out[dst + xx * f[2]] += *v;
                                } else {
                                    out[dst + xx * f[2]] = *v;
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Transposed convolution whose kernel equals its stride (U-Net up-conv).
#[derive(Debug, Clone)]
pub struct UpConv {
    /// `(cin, cout, fd, fh, fw)`
    pub weight: Param,
    pub bias: Param,
    pub cin: usize,
    pub cout: usize,
    pub factor: [usize; 3],
    input: Option<Tensor>,
}

impl UpConv {
    pub fn new<R: Rng>(rng: &mut R, cin: usize, cout: usize, factor: [usize; 3]) -> Self {
        let fv = kvol(factor);
        Self {
            weight: Param::new(vec![cin, cout, factor[0], factor[1], factor[2]], he_normal(rng, cin, cin * cout * fv)),
            bias: Param::filled(vec![cout], 0.0),
            cin,
            cout,
            factor,
            input: None,
        }
    }

    pub fn forward(&mut self, x: &Tensor, cache: bool) -> Tensor {
        let [n, _, d, h, w] = x.shape;
        let f = self.factor;
        let (od, oh, ow) = (d * f[0], h * f[1], w * f[2]);
        let rows = self.cout * kvol(f);
        let p = d * h * w;
        let mut out = Tensor::zeros([n, self.cout, od, oh, ow]);
        let mut cols = vec![0.0; rows * p];
        let op = od * oh * ow;
        for i in 0..n {
            gemm(rows, self.cin, p, &self.weight.value, true, x.sample(i), false, 0.0, &mut cols);
            let ys = out.sample_mut(i);
            depth_to_space(&cols, self.cout, [od, oh, ow], f, ys, false);
            for (co, b) in self.bias.value.iter().enumerate() {
                ys[co * op..(co + 1) * op].iter_mut().for_each(|v| *v += *b);
            }
        }
        self.input = cache.then(|| x.clone());
        out
    }

    pub fn backward(&mut self, dy: &Tensor) -> Tensor {
        let x = self.input.take().expect("upconv backward without cached forward");
        let [n, _, d, h, w] = x.shape;
        let f = self.factor;
        let rows = self.cout * kvol(f);
        let p = d * h * w;
        let op = dy.voxels();
        let mut cols = vec![0.0; rows * p];
        let mut dx = Tensor::zeros(x.shape);
        for i in 0..n {
            let dys = dy.sample(i);
            for (co, g) in self.bias.grad.iter_mut().enumerate() {
                *g += dys[co * op..(co + 1) * op].iter().sum::<f32>();
            }
            space_to_depth(dys, self.cout, dy.spatial(), f, &mut cols);
            // dW (cin × rows) += X · colsᵀ
            gemm(self.cin, p, rows, x.sample(i), false, &cols, true, 1.0, &mut self.weight.grad);
            gemm(self.cin, rows, p, &self.weight.value, false, &cols, false, 0.0, dx.sample_mut(i));
        }
        let _ = (d, h, w);
        dx
    }
}

impl Parameterized for UpConv {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

/// Convolution whose kernel equals its stride, without bias; maps a fine
/// grid onto the next coarser one.
#[derive(Debug, Clone)]
pub struct PatchConv {
    /// `(cout, cin, fd, fh, fw)`
    pub weight: Param,
    pub cin: usize,
    pub cout: usize,
    pub factor: [usize; 3],
    cols: Option<(Vec<f32>, [usize; 5])>,
}

impl PatchConv {
    pub fn new<R: Rng>(rng: &mut R, cin: usize, cout: usize, factor: [usize; 3]) -> Self {
        let fan_in = cin * kvol(factor);
        Self {
            weight: Param::new(vec![cout, cin, factor[0], factor[1], factor[2]], he_normal(rng, fan_in, cout * fan_in)),
            cin,
            cout,
            factor,
            cols: None,
        }
    }

    pub fn forward(&mut self, x: &Tensor, cache: bool) -> Tensor {
        let [n, _, d, h, w] = x.shape;
        let f = self.factor;
        let (od, oh, ow) = (d / f[0], h / f[1], w / f[2]);
        let po = od * oh * ow;
        let rows = self.cin * kvol(f);
        let mut all_cols = vec![0.0; n * rows * po];
        let mut out = Tensor::zeros([n, self.cout, od, oh, ow]);
        for i in 0..n {
            let cols = &mut all_cols[i * rows * po..(i + 1) * rows * po];
            space_to_depth(x.sample(i), self.cin, [d, h, w], f, cols);
            gemm(self.cout, rows, po, &self.weight.value, false, cols, false, 0.0, out.sample_mut(i));
        }
        self.cols = cache.then_some((all_cols, x.shape));
        out
    }

    pub fn backward(&mut self, dy: &Tensor) -> Tensor {
        let (all_cols, shape) = self.cols.take().expect("patch conv backward without cached forward");
        let n = shape[0];
        let rows = self.cin * kvol(self.factor);
        let po = dy.voxels();
        let mut dcols = vec![0.0; rows * po];
        let mut dx = Tensor::zeros(shape);
        for i in 0..n {
            let cols = &all_cols[i * rows * po..(i + 1) * rows * po];
            gemm(self.cout, po, rows, dy.sample(i), false, cols, true, 1.0, &mut self.weight.grad);
            gemm(rows, self.cout, po, &self.weight.value, true, dy.sample(i), false, 0.0, &mut dcols);
            depth_to_space(&dcols, self.cin, [shape[2], shape[3], shape[4]], self.factor, dx.sample_mut(i), false);
        }
        dx
    }
}

impl Parameterized for PatchConv {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "weight"), &mut self.weight);
    }
}

/// Per-sample, per-channel normalization with learned scale and shift.
#[derive(Debug, Clone)]
pub struct InstanceNorm {
    pub gamma: Param,
    pub beta: Param,
    pub eps: f32,
    cache: Option<(Tensor, Vec<f32>)>,
}

impl InstanceNorm {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Param::filled(vec![channels], 1.0),
            beta: Param::filled(vec![channels], 0.0),
            eps: 1e-5,
            cache: None,
        }
    }

    pub fn forward(&mut self, x: &Tensor, cache: bool) -> Tensor {
        let [n, c, ..] = x.shape;
        let p = x.voxels();
        let mut xhat = Tensor::zeros(x.shape);
        let mut inv_std = vec![0.0f32; n * c];
        let mut out = Tensor::zeros(x.shape);
        for i in 0..n {
            for ch in 0..c {
                let off = (i * c + ch) * p;
                let src = &x.data[off..off + p];
                let mean = src.iter().map(|v| *v as f64).sum::<f64>() / p as f64;
                let var = src.iter().map(|v| (*v as f64 - mean).powi(2)).sum::<f64>() / p as f64;
                let is = (1.0 / (var + self.eps as f64).sqrt()) as f32;
                inv_std[i * c + ch] = is;
                let (g, b) = (self.gamma.value[ch], self.beta.value[ch]);
                let (mean, hat, o) = (mean as f32, &mut xhat.data[off..off + p], &mut out.data[off..off + p]);
                for k in 0..p {
                    let xh = (src[k] - mean) * is;
                    hat[k] = xh;
                    o[k] = g * xh + b;
                }
            }
        }
        self.cache = cache.then_some((xhat, inv_std));
        out
    }

    pub fn backward(&mut self, dy: &Tensor) -> Tensor {
        let (xhat, inv_std) = self.cache.take().expect("norm backward without cached forward");
        let [n, c, ..] = dy.shape;
        let p = dy.voxels();
        let mut dx = Tensor::zeros(dy.shape);
        for i in 0..n {
            for ch in 0..c {
                let off = (i * c + ch) * p;
                let (g, hat, d) = (&dy.data[off..off + p], &xhat.data[off..off + p], &mut dx.data[off..off + p]);
                let mut sum_dy = 0.0f64;
                let mut sum_dy_xhat = 0.0f64;
                for k in 0..p {
                    sum_dy += g[k] as f64;
                    sum_dy_xhat += (g[k] * hat[k]) as f64;
                }
                self.gamma.grad[ch] += sum_dy_xhat as f32;
                self.beta.grad[ch] += sum_dy as f32;
                let gamma = self.gamma.value[ch];
                let scale = gamma * inv_std[i * c + ch] / p as f32;
                let (sdy, sdyx) = (sum_dy as f32, sum_dy_xhat as f32);
                for k in 0..p {
                    d[k] = scale * (p as f32 * g[k] - sdy - hat[k] * sdyx);
                }
            }
        }
        dx
    }
}

impl Parameterized for InstanceNorm {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "gamma"), &mut self.gamma);
        f(&join(prefix, "beta"), &mut self.beta);
    }
}

#[derive(Debug, Clone, Default)]
pub struct Relu {
    mask: Option<Vec<bool>>,
}

impl Relu {
    pub fn forward(&mut self, mut x: Tensor, cache: bool) -> Tensor {
        if cache {
            self.mask = Some(x.data.iter().map(|v| *v > 0.0).collect());
        }
        x.data.iter_mut().for_each(|v| *v = v.max(0.0));
        x
    }

    pub fn backward(&mut self, mut dy: Tensor) -> Tensor {
        let mask = self.mask.take().expect("relu backward without cached forward");
        for (g, m) in dy.data.iter_mut().zip(mask) {
            if !m {
                *g = 0.0;
            }
        }
        dy
    }
}

#[derive(Debug, Clone, Default)]
pub struct Sigmoid {
    out: Option<Tensor>,
}

pub fn sigmoid(v: f32) -> f32 {
    1.0 / (1.0 + (-v).exp())
}

impl Sigmoid {
    pub fn forward(&mut self, mut x: Tensor, cache: bool) -> Tensor {
        x.data.iter_mut().for_each(|v| *v = sigmoid(*v));
        if cache {
            self.out = Some(x.clone());
        }
        x
    }

    pub fn backward(&mut self, mut dy: Tensor) -> Tensor {
        let out = self.out.take().expect("sigmoid backward without cached forward");
        for (g, y) in dy.data.iter_mut().zip(&out.data) {
            *g *= y * (1.0 - y);
        }
        dy
    }
}

/// Max pooling with window equal to stride.
#[derive(Debug, Clone)]
pub struct MaxPool {
    pub factor: [usize; 3],
    argmax: Option<(Vec<u32>, [usize; 5])>,
}

impl MaxPool {
    pub fn new(factor: [usize; 3]) -> Self {
        Self { factor, argmax: None }
    }

    pub fn forward(&mut self, x: &Tensor, cache: bool) -> Tensor {
        let [n, c, d, h, w] = x.shape;
        let f = self.factor;
        let (od, oh, ow) = (d / f[0], h / f[1], w / f[2]);
        let mut out = Tensor::zeros([n, c, od, oh, ow]);
        let mut arg = vec![0u32; out.data.len()];
        let p = d * h * w;
        let mut o = 0;
        for nc in 0..n * c {
            let base = nc * p;
            for z in 0..od {
                for y in 0..oh {
                    for xx in 0..ow {
                        let mut best = f32::NEG_INFINITY;
                        let mut best_i = 0;
                        for a in 0..f[0] {
                            for b in 0..f[1] {
                                for e in 0..f[2] {
                                    let idx = ((z * f[0] + a) * h + y * f[1] + b) * w + xx * f[2] + e;
                                    let v = x.data[base + idx];
                                    if v > best {
                                        best = v;
                                        best_i = idx;
                                    }
                                }
                            }
                        }
                        out.data[o] = best;
                        arg[o] = best_i as u32;
                        o += 1;
                    }
                }
            }
        }
        self.argmax = cache.then_some((arg, x.shape));
        out
    }

    pub fn backward(&mut self, dy: &Tensor) -> Tensor {
        let (arg, shape) = self.argmax.take().expect("pool backward without cached forward");
        let mut dx = Tensor::zeros(shape);
        let p = shape[2] * shape[3] * shape[4];
        let po = dy.voxels();
        for (o, g) in dy.data.iter().enumerate() {
            let nc = o / po;
            dx.data[nc * p + arg[o] as usize] += *g;
        }
        dx
    }
}

/// Inverted dropout; a no-op unless `active`.
#[derive(Debug, Clone)]
pub struct Dropout {
    pub rate: f32,
    mask: Option<Vec<f32>>,
}

impl Dropout {
    pub fn new(rate: f32) -> Self {
        Self { rate, mask: None }
    }

    pub fn forward<R: Rng>(&mut self, mut x: Tensor, active: bool, rng: &mut R, cache: bool) -> Tensor {
        if !active || self.rate <= 0.0 {
            self.mask = cache.then(|| vec![1.0; x.data.len()]);
            return x;
        }
        let keep = 1.0 - self.rate;
        let mask: Vec<f32> = (0..x.data.len())
            .map(|_| if rng.random::<f32>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        for (v, m) in x.data.iter_mut().zip(&mask) {
            *v *= m;
        }
        if cache {
            self.mask = Some(mask);
        }
        x
    }

    pub fn backward(&mut self, mut dy: Tensor) -> Tensor {
        let mask = self.mask.take().expect("dropout backward without cached forward");
        for (g, m) in dy.data.iter_mut().zip(mask) {
            *g *= m;
        }
        dy
    }
}

/// Fully connected layer on `(N, in)` row vectors.
#[derive(Debug, Clone)]
pub struct Linear {
    /// `(out, in)`
    pub weight: Param,
    pub bias: Param,
    pub fan_in: usize,
    pub fan_out: usize,
    input: Option<(Vec<f32>, usize)>,
}

impl Linear {
    pub fn new<R: Rng>(rng: &mut R, fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: Param::new(vec![fan_out, fan_in], he_normal(rng, fan_in, fan_in * fan_out)),
            bias: Param::filled(vec![fan_out], 0.0),
            fan_in,
            fan_out,
            input: None,
        }
    }

    pub fn forward(&mut self, x: &[f32], n: usize, cache: bool) -> Vec<f32> {
        assert_eq!(x.len(), n * self.fan_in, "linear input size");
        let mut y: Vec<f32> = (0..n).flat_map(|_| self.bias.value.iter().copied()).collect();
        gemm(n, self.fan_in, self.fan_out, x, false, &self.weight.value, true, 1.0, &mut y);
        self.input = cache.then(|| (x.to_vec(), n));
        y
    }

    pub fn backward(&mut self, dy: &[f32]) -> Vec<f32> {
        let (x, n) = self.input.take().expect("linear backward without cached forward");
        for i in 0..n {
            for (g, d) in self.bias.grad.iter_mut().zip(&dy[i * self.fan_out..(i + 1) * self.fan_out]) {
                *g += *d;
            }
        }
        gemm(self.fan_out, n, self.fan_in, dy, true, &x, false, 1.0, &mut self.weight.grad);
        let mut dx = vec![0.0; n * self.fan_in];
        gemm(n, self.fan_out, self.fan_in, dy, false, &self.weight.value, false, 0.0, &mut dx);
        dx
    }
}

impl Parameterized for Linear {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

/// Per-sample, per-channel affine modulation `γ·x + β`.
///
/// `gamma` and `beta` are `(N, C)` row-major.
pub fn film_modulate(x: &Tensor, gamma: &[f32], beta: &[f32]) -> Tensor {
    let [n, c, ..] = x.shape;
    assert_eq!(gamma.len(), n * c, "FiLM gamma length");
    assert_eq!(beta.len(), n * c, "FiLM beta length");
    let p = x.voxels();
    let mut out = x.clone();
    for nc in 0..n * c {
        let (g, b) = (gamma[nc], beta[nc]);
        out.data[nc * p..(nc + 1) * p].iter_mut().for_each(|v| *v = g * *v + b);
    }
    out
}

/// Gradients of [`film_modulate`]: `(dx, dgamma, dbeta)`.
pub fn film_modulate_backward(x: &Tensor, gamma: &[f32], dy: &Tensor) -> (Tensor, Vec<f32>, Vec<f32>) {
    let [n, c, ..] = x.shape;
    let p = x.voxels();
    let mut dx = dy.clone();
    let mut dg = vec![0.0; n * c];
    let mut db = vec![0.0; n * c];
    for nc in 0..n * c {
        let (xs, ds) = (&x.data[nc * p..(nc + 1) * p], &dy.data[nc * p..(nc + 1) * p]);
        let mut sg = 0.0f64;
        let mut sb = 0.0f64;
        for k in 0..p {
            sg += (ds[k] * xs[k]) as f64;
            sb += ds[k] as f64;
        }
        dg[nc] = sg as f32;
        db[nc] = sb as f32;
        dx.data[nc * p..(nc + 1) * p].iter_mut().for_each(|v| *v *= gamma[nc]);
    }
    (dx, dg, db)
}
