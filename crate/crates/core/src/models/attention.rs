use rand::Rng;

use super::ModelError;
use crate::nn::tensor::join;
use crate::nn::{sigmoid, Conv, Param, Parameterized, PatchConv, Relu, Tensor};

/// Additive attention gate. The skip path is projected to the gating grid
/// by a strided convolution, the gating path by a 1×1 convolution; only the
/// final 1-channel projection carries a bias.
#[derive(Debug, Clone)]
pub struct AttentionGate {
    pub theta: PatchConv,
    pub phi: Conv,
    pub psi: Conv,
    pub factor: [usize; 3],
    relu: Relu,
    cache: Option<(Tensor, Tensor)>,
}

fn upsample_index(fine: [usize; 3], factor: [usize; 3]) -> impl Fn(usize) -> usize {
    let [_, h, w] = fine;
    let (ch, cw) = (h / factor[1], w / factor[2]);
    move |i| {
        let x = i % w;
        let y = (i / w) % h;
        let z = i / (w * h);
        ((z / factor[0]) * ch + y / factor[1]) * cw + x / factor[2]
    }
}

impl AttentionGate {
    pub fn new<R: Rng>(rng: &mut R, skip_channels: usize, gate_channels: usize, factor: [usize; 3]) -> Self {
        let inter = (skip_channels / 2).max(1);
        Self {
            theta: PatchConv::new(rng, skip_channels, inter, factor),
            phi: Conv::new(rng, gate_channels, inter, [1, 1, 1], false),
            psi: Conv::new(rng, inter, 1, [1, 1, 1], true),
            factor,
            relu: Relu::default(),
            cache: None,
        }
    }

    /// Checked entry point: returns the gated skip features.
    pub fn apply(&mut self, skip: &Tensor, gating: &Tensor) -> Result<Tensor, ModelError> {
        if skip.c() != self.theta.cin || gating.c() != self.phi.cin {
            return Err(ModelError::Shape(format!(
                "attention gate expects skip/gating channels {}/{}, got {}/{}",
                self.theta.cin,
                self.phi.cin,
                skip.c(),
                gating.c()
            )));
        }
        let coarse: Vec<usize> = skip.spatial().iter().zip(self.factor).map(|(s, f)| s / f).collect();
        if skip.n() != gating.n() || coarse != gating.spatial() || skip.spatial().iter().zip(self.factor).any(|(s, f)| s % f != 0) {
            return Err(ModelError::Shape(format!(
                "gating grid {:?} is not the skip grid {:?} reduced by {:?}",
                gating.spatial(),
                skip.spatial(),
                self.factor
            )));
        }
        Ok(self.forward(skip, gating, false).0)
    }

    /// Returns the gated skip and the coarse attention map `(N, 1, …)`.
    pub fn forward(&mut self, skip: &Tensor, gating: &Tensor, cache: bool) -> (Tensor, Tensor) {
        let mut s = self.theta.forward(skip, cache);
        s.add_assign(&self.phi.forward(gating, cache));
        let s = self.relu.forward(s, cache);
        let mut alpha = self.psi.forward(&s, cache);
        alpha.data.iter_mut().for_each(|v| *v = sigmoid(*v));
        let mut out = skip.clone();
        let p = skip.voxels();
        let pc = alpha.voxels();
        let map = upsample_index(skip.spatial(), self.factor);
        for n in 0..skip.n() {
            let a = &alpha.data[n * pc..(n + 1) * pc];
            for c in 0..skip.c() {
                let seg = &mut out.data[(n * skip.c() + c) * p..(n * skip.c() + c + 1) * p];
                for (i, v) in seg.iter_mut().enumerate() {
                    *v *= a[map(i)];
                }
            }
        }
        if cache {
            self.cache = Some((skip.clone(), alpha.clone()));
        }
        (out, alpha)
    }

    /// Returns `(d_skip, d_gating)`.
    pub fn backward(&mut self, dout: &Tensor) -> (Tensor, Tensor) {
        let (skip, alpha) = self.cache.take().expect("attention backward without cached forward");
        let p = skip.voxels();
        let pc = alpha.voxels();
        let c = skip.c();
        let map = upsample_index(skip.spatial(), self.factor);
        let mut dskip = dout.clone();
        let mut dalpha = Tensor::zeros(alpha.shape);
        for n in 0..skip.n() {
            let a = &alpha.data[n * pc..(n + 1) * pc];
            let da = &mut dalpha.data[n * pc..(n + 1) * pc];
            for ch in 0..c {
                let off = (n * c + ch) * p;
                for i in 0..p {
                    let j = map(i);
                    da[j] += dout.data[off + i] * skip.data[off + i];
                    dskip.data[off + i] *= a[j];
                }
            }
        }
        for (d, a) in dalpha.data.iter_mut().zip(&alpha.data) {
            *d *= a * (1.0 - a);
        }
        let ds = self.psi.backward(&dalpha);
        let ds = self.relu.backward(ds);
        dskip.add_assign(&self.theta.backward(&ds));
        let dg = self.phi.backward(&ds);
        (dskip, dg)
    }
}

impl Parameterized for AttentionGate {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.theta.visit_params(&join(prefix, "theta"), f);
        self.phi.visit_params(&join(prefix, "phi"), f);
        self.psi.visit_params(&join(prefix, "psi"), f);
    }
}
