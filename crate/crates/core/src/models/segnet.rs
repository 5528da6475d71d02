//! U-Net family network: plain, FiLM-conditioned, attention-gated and
//! hetero-modal variants share one implementation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::attention::AttentionGate;
use super::film::FilmGenerator;
use super::hemis::{hemis_fuse, hemis_fuse_backward};
use super::spec::{Architecture, ModelSpec};
use super::ModelError;
use crate::nn::tensor::join;
use crate::nn::{film_modulate, film_modulate_backward, Conv, Dropout, InstanceNorm, MaxPool, Param, Parameterized, Relu, Sigmoid, Tensor, UpConv};

/// conv → norm → [FiLM] → relu, twice. FiLM applies after the second norm.
#[derive(Debug, Clone)]
pub struct ConvBlock {
    pub conv1: Conv,
    pub norm1: InstanceNorm,
    pub conv2: Conv,
    pub norm2: InstanceNorm,
    relu1: Relu,
    relu2: Relu,
    film_cache: Option<(Tensor, Vec<f32>)>,
}

impl ConvBlock {
    pub fn new(rng: &mut ChaCha8Rng, cin: usize, cout: usize, kernel: [usize; 3]) -> Self {
        Self {
            conv1: Conv::new(rng, cin, cout, kernel, true),
            norm1: InstanceNorm::new(cout),
            conv2: Conv::new(rng, cout, cout, kernel, true),
            norm2: InstanceNorm::new(cout),
            relu1: Relu::default(),
            relu2: Relu::default(),
            film_cache: None,
        }
    }

    pub fn forward(&mut self, x: &Tensor, film: Option<(&[f32], &[f32])>, cache: bool) -> Tensor {
        let h = self.conv1.forward(x, cache);
        let h = self.norm1.forward(&h, cache);
        let h = self.relu1.forward(h, cache);
        let h = self.conv2.forward(&h, cache);
        let mut h = self.norm2.forward(&h, cache);
        if let Some((g, b)) = film {
            if cache {
                self.film_cache = Some((h.clone(), g.to_vec()));
            }
            h = film_modulate(&h, g, b);
        }
        self.relu2.forward(h, cache)
    }

    /// Returns the input gradient and, if FiLM was applied, `(dγ, dβ)`.
    pub fn backward(&mut self, dy: Tensor) -> (Tensor, Option<(Vec<f32>, Vec<f32>)>) {
        let mut d = self.relu2.backward(dy);
        let film = self.film_cache.take().map(|(x, g)| {
            let (dx, dg, db) = film_modulate_backward(&x, &g, &d);
            d = dx;
            (dg, db)
        });
        let d = self.norm2.backward(&d);
        let d = self.conv2.backward(&d);
        let d = self.relu1.backward(d);
        let d = self.norm1.backward(&d);
        (self.conv1.backward(&d), film)
    }
}

impl Parameterized for ConvBlock {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.conv1.visit_params(&join(prefix, "conv1"), f);
        self.norm1.visit_params(&join(prefix, "norm1"), f);
        self.conv2.visit_params(&join(prefix, "conv2"), f);
        self.norm2.visit_params(&join(prefix, "norm2"), f);
    }
}

/// Per-call inputs besides the image batch.
#[derive(Debug, Clone, Default)]
pub struct ForwardCtx {
    /// `(N, film_input_dim)` row-major metadata encodings.
    pub film_input: Option<Vec<f32>>,
    /// Per-sample modality availability for hetero-modal fusion.
    pub availability: Option<Vec<Vec<bool>>>,
    /// Keep dropout active (training or Monte Carlo sampling).
    pub dropout: bool,
}

#[derive(Debug, Clone, Default)]
struct Cache {
    n: usize,
    skips: Vec<Vec<Tensor>>,
    bottleneck: Vec<Tensor>,
    availability: Vec<Vec<bool>>,
    film_used: bool,
}

#[derive(Debug, Clone)]
pub struct SegNet {
    pub spec: ModelSpec,
    pub encoders: Vec<Vec<ConvBlock>>,
    pub bottlenecks: Vec<ConvBlock>,
    pub ups: Vec<UpConv>,
    pub decoders: Vec<ConvBlock>,
    pub gates: Vec<AttentionGate>,
    pub head: Conv,
    pub film: Option<FilmGenerator>,
    /// Applies γ = 1, β = 0 in every modulated block instead of the
    /// generator output.
    pub force_identity_film: bool,
    pools: Vec<Vec<MaxPool>>,
    dropout: Dropout,
    sigmoid: Sigmoid,
    cache: Option<Cache>,
}

impl SegNet {
    pub fn new(spec: &ModelSpec, seed: u64) -> Result<Self, ModelError> {
        let spec = spec.clone().with_defaults();
        spec.validate()?;
        if spec.architecture == Architecture::FilmUnet && spec.film_input_dim == 0 {
            return Err(ModelError::InvalidSpec {
                field: "film_input_dim".into(),
                msg: "film_unet needs the metadata encoding length".into(),
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (k, f, depth) = (spec.kernel(), spec.pool_factor(), spec.depth);
        let hemis = spec.architecture == Architecture::HemisUnet;
        let n_enc = if hemis { spec.n_modalities } else { 1 };
        let enc_in = if hemis { 1 } else { spec.in_channels };
        let ch = |l: usize| spec.level_channels(l);
        let mut encoders = Vec::new();
        let mut bottlenecks = Vec::new();
        let mut pools = Vec::new();
        for _ in 0..n_enc {
            let mut levels = Vec::new();
            for l in 0..depth {
                levels.push(ConvBlock::new(&mut rng, if l == 0 { enc_in } else { ch(l - 1) }, ch(l), k));
            }
            encoders.push(levels);
            bottlenecks.push(ConvBlock::new(&mut rng, ch(depth - 1), ch(depth), k));
            pools.push((0..depth).map(|_| MaxPool::new(f)).collect());
        }
        // Fused tensors carry mean and variance, doubling skip channels.
        let fuse = if hemis { 2 } else { 1 };
        let mut ups = Vec::new();
        let mut decoders = Vec::new();
        let mut gates = Vec::new();
        for l in 0..depth {
            let below = if l + 1 == depth { fuse * ch(depth) } else { ch(l + 1) };
            ups.push(UpConv::new(&mut rng, below, ch(l), f));
            decoders.push(ConvBlock::new(&mut rng, ch(l) + fuse * ch(l), ch(l), k));
            if spec.architecture == Architecture::AttentionUnet {
                gates.push(AttentionGate::new(&mut rng, ch(l), below, f));
            }
        }
        let head = Conv::new(&mut rng, ch(0), spec.out_classes, [1, 1, 1], true);
        let film = (spec.architecture == Architecture::FilmUnet).then(|| {
            let channels = (0..spec.modulatable_blocks())
                .filter(|b| spec.film_layers[*b])
                .map(|b| ch(block_level(depth, b)))
                .collect();
            FilmGenerator::new(&mut rng, spec.film_input_dim, channels)
        });
        let mut net = Self {
            dropout: Dropout::new(spec.dropout_rate as f32),
            spec,
            encoders,
            bottlenecks,
            ups,
            decoders,
            gates,
            head,
            film,
            force_identity_film: false,
            pools,
            sigmoid: Sigmoid::default(),
            cache: None,
        };
        net.probe()?;
        Ok(net)
    }

    /// Runs a minimal input through the network and checks the output shape.
    fn probe(&mut self) -> Result<(), ModelError> {
        let m = 1 << self.spec.depth;
        let shape = if self.spec.dims() == 2 {
            [1, self.spec.in_channels, 1, m, m]
        } else {
            [1, self.spec.in_channels, m, m, m]
        };
        let x = Tensor::zeros(shape);
        let ctx = self.neutral_ctx(1);
        let y = self.forward(&x, &ctx, &mut ChaCha8Rng::seed_from_u64(0))?;
        if y.spatial() != x.spatial() || y.c() != self.spec.out_classes {
            return Err(ModelError::Shape(format!("probe output {:?} does not match input {:?}", y.shape, x.shape)));
        }
        Ok(())
    }

    /// A context with all modalities present and a zero metadata encoding.
    pub fn neutral_ctx(&self, n: usize) -> ForwardCtx {
        ForwardCtx {
            film_input: self.film.as_ref().map(|g| vec![0.0; n * g.input_dim()]),
            availability: (self.spec.architecture == Architecture::HemisUnet).then(|| vec![vec![true; self.spec.n_modalities]; n]),
            dropout: false,
        }
    }

    /// Spatial multiple every input dimension must satisfy.
    pub fn size_multiple(&self) -> [usize; 3] {
        let m = 1 << self.spec.depth;
        if self.spec.dims() == 2 {
            [1, m, m]
        } else {
            [m, m, m]
        }
    }

    pub fn check_input(&self, x: &Tensor) -> Result<(), ModelError> {
        if x.c() != self.spec.in_channels {
            return Err(ModelError::Shape(format!("expected {} input channels, got {}", self.spec.in_channels, x.c())));
        }
        if self.spec.dims() == 2 && x.shape[2] != 1 {
            return Err(ModelError::Shape("2D network needs inputs with a depth of 1".into()));
        }
        let m = self.size_multiple();
        if x.spatial().iter().zip(m).any(|(s, m)| s % m != 0 || *s == 0) {
            return Err(ModelError::Shape(format!("spatial dims {:?} must be multiples of {:?}", x.spatial(), m)));
        }
        Ok(())
    }

    pub fn forward(&mut self, x: &Tensor, ctx: &ForwardCtx, rng: &mut ChaCha8Rng) -> Result<Tensor, ModelError> {
        self.check_input(x)?;
        self.run(x, ctx, rng, false)
    }

    /// Forward pass that keeps everything needed by [`SegNet::backward`].
    pub fn forward_train(&mut self, x: &Tensor, ctx: &ForwardCtx, rng: &mut ChaCha8Rng) -> Result<Tensor, ModelError> {
        self.check_input(x)?;
        self.run(x, ctx, rng, true)
    }

    fn film_slices(&mut self, ctx: &ForwardCtx, n: usize, cache: bool) -> Result<Vec<Option<(Vec<f32>, Vec<f32>)>>, ModelError> {
        let blocks = self.spec.modulatable_blocks();
        let Some(gen) = self.film.as_mut() else {
            return Ok(vec![None; blocks]);
        };
        let mut out = vec![None; blocks];
        let modulated: Vec<usize> = (0..blocks).filter(|b| self.spec.film_layers[*b]).collect();
        if self.force_identity_film {
            for b in modulated {
                let c = self.spec.level_channels(block_level(self.spec.depth, b));
                out[b] = Some((vec![1.0; n * c], vec![0.0; n * c]));
            }
            return Ok(out);
        }
        let enc = ctx.film_input.as_ref().ok_or_else(|| ModelError::Shape("film_unet needs metadata encodings".into()))?;
        if enc.len() != n * gen.input_dim() {
            return Err(ModelError::Shape(format!(
                "metadata encodings have length {}, expected {} × {}",
                enc.len(),
                n,
                gen.input_dim()
            )));
        }
        let raw = gen.forward(enc, n, cache);
        let total = gen.output_dim();
        let mut off = 0;
        for b in modulated {
            let c = self.spec.level_channels(block_level(self.spec.depth, b));
            let mut g = Vec::with_capacity(n * c);
            let mut be = Vec::with_capacity(n * c);
            for i in 0..n {
                g.extend_from_slice(&raw[i * total + off..i * total + off + c]);
                be.extend_from_slice(&raw[i * total + off + c..i * total + off + 2 * c]);
            }
            out[b] = Some((g, be));
            off += 2 * c;
        }
        Ok(out)
    }

    fn run(&mut self, x: &Tensor, ctx: &ForwardCtx, rng: &mut ChaCha8Rng, cache: bool) -> Result<Tensor, ModelError> {
        let n = x.n();
        let depth = self.spec.depth;
        let hemis = self.spec.architecture == Architecture::HemisUnet;
        let film = self.film_slices(ctx, n, cache)?;
        let fp = |b: usize| film[b].as_ref().map(|(g, be)| (g.as_slice(), be.as_slice()));
        let availability = if hemis {
            let a = ctx
                .availability
                .clone()
                .unwrap_or_else(|| vec![vec![true; self.spec.n_modalities]; n]);
            Some(a)
        } else {
            None
        };
        let inputs: Vec<Tensor> = if hemis { (0..self.spec.n_modalities).map(|m| x.channel(m)).collect() } else { vec![x.clone()] };
        let mut skips = vec![Vec::with_capacity(depth); inputs.len()];
        let mut bott = Vec::with_capacity(inputs.len());
        for (m, input) in inputs.iter().enumerate() {
            let mut h = input.clone();
            for l in 0..depth {
                h = self.encoders[m][l].forward(&h, fp(l), cache);
                skips[m].push(h.clone());
                h = self.pools[m][l].forward(&h, cache);
            }
            bott.push(self.bottlenecks[m].forward(&h, fp(depth), cache));
        }
        let mut h = match &availability {
            Some(a) => hemis_fuse(&bott, a)?,
            None => bott[0].clone(),
        };
        h = self.dropout.forward(h, ctx.dropout, rng, cache);
        for l in (0..depth).rev() {
            let up = self.ups[l].forward(&h, cache);
            let mut skip = match &availability {
                Some(a) => {
                    let level: Vec<Tensor> = skips.iter().map(|s| s[l].clone()).collect();
                    hemis_fuse(&level, a)?
                }
                None => skips[0][l].clone(),
            };
            if !self.gates.is_empty() {
                skip = self.gates[l].forward(&skip, &h, cache).0;
            }
            h = self.decoders[l].forward(&Tensor::concat(&up, &skip), fp(2 * depth - l), cache);
        }
        let logits = self.head.forward(&h, cache);
        let y = self.sigmoid.forward(logits, cache);
        if cache {
            self.cache = Some(Cache {
                n,
                skips: if hemis { skips } else { Vec::new() },
                bottleneck: if hemis { bott } else { Vec::new() },
                availability: availability.unwrap_or_default(),
                film_used: self.film.is_some() && !self.force_identity_film,
            });
        }
        Ok(y)
    }

    /// Accumulates parameter gradients given `dL/d(output probabilities)`.
    pub fn backward(&mut self, dy: Tensor) {
        let cache = self.cache.take().expect("backward without forward_train");
        let depth = self.spec.depth;
        let hemis = self.spec.architecture == Architecture::HemisUnet;
        let blocks = self.spec.modulatable_blocks();
        let mut film_grads: Vec<Option<(Vec<f32>, Vec<f32>)>> = vec![None; blocks];
        let d = self.sigmoid.backward(dy);
        let mut d = self.head.backward(&d);
        let n_enc = self.encoders.len();
        let mut dskips: Vec<Vec<Option<Tensor>>> = vec![vec![None; depth]; n_enc];
        for l in 0..depth {
            let (dd, fg) = self.decoders[l].backward(d);
            film_grads[2 * depth - l] = fg;
            let c_up = self.ups[l].cout;
            let (dup, mut dskip) = dd.split(c_up);
            let mut dg = self.ups[l].backward(&dup);
            if !self.gates.is_empty() {
                let (ds, dgate) = self.gates[l].backward(&dskip);
                dskip = ds;
                dg.add_assign(&dgate);
            }
            if hemis {
                let level: Vec<Tensor> = cache.skips.iter().map(|s| s[l].clone()).collect();
                for (m, g) in hemis_fuse_backward(&level, &cache.availability, &dskip).into_iter().enumerate() {
                    dskips[m][l] = Some(g);
                }
            } else {
                dskips[0][l] = Some(dskip);
            }
            d = dg;
        }
        let d = self.dropout.backward(d);
        let dbott = if hemis { hemis_fuse_backward(&cache.bottleneck, &cache.availability, &d) } else { vec![d] };
        for (m, db) in dbott.into_iter().enumerate() {
            let (mut d, fg) = self.bottlenecks[m].backward(db);
            if m == 0 {
                film_grads[depth] = fg;
            }
            for l in (0..depth).rev() {
                d = self.pools[m][l].backward(&d);
                d.add_assign(dskips[m][l].as_ref().expect("skip gradient"));
                let (dd, fg) = self.encoders[m][l].backward(d);
                if m == 0 {
                    film_grads[l] = fg;
                }
                d = dd;
            }
        }
        if cache.film_used {
            let gen = self.film.as_mut().expect("film generator");
            let total = gen.output_dim();
            let n = cache.n;
            let mut dout = vec![0.0; n * total];
            let mut off = 0;
            for b in (0..blocks).filter(|b| self.spec.film_layers[*b]) {
                let c = self.spec.level_channels(block_level(depth, b));
                if let Some((dg, db)) = &film_grads[b] {
                    for i in 0..n {
                        dout[i * total + off..i * total + off + c].copy_from_slice(&dg[i * c..(i + 1) * c]);
                        dout[i * total + off + c..i * total + off + 2 * c].copy_from_slice(&db[i * c..(i + 1) * c]);
                    }
                }
                off += 2 * c;
            }
            gen.backward(&dout);
        }
    }
}

/// Encoder level (or bottleneck) whose channel count block `b` uses.
fn block_level(depth: usize, b: usize) -> usize {
    if b <= depth {
        b
    } else {
        2 * depth - b
    }
}

impl Parameterized for SegNet {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        let hemis = self.encoders.len() > 1 || self.spec.architecture == Architecture::HemisUnet;
        for (m, (levels, bott)) in self.encoders.iter_mut().zip(self.bottlenecks.iter_mut()).enumerate() {
            let base = if hemis { join(prefix, &format!("mod{m}")) } else { prefix.to_string() };
            for (l, block) in levels.iter_mut().enumerate() {
                block.visit_params(&join(&base, &format!("encoder{l}")), f);
            }
            bott.visit_params(&join(&base, "bottleneck"), f);
        }
        for (l, up) in self.ups.iter_mut().enumerate() {
            up.visit_params(&join(prefix, &format!("up{l}")), f);
        }
        for (l, gate) in self.gates.iter_mut().enumerate() {
            gate.visit_params(&join(prefix, &format!("attention{l}")), f);
        }
        for (l, block) in self.decoders.iter_mut().enumerate() {
            block.visit_params(&join(prefix, &format!("decoder{l}")), f);
        }
        self.head.visit_params(&join(prefix, "head"), f);
        if let Some(gen) = &mut self.film {
            gen.visit_params(&join(prefix, "film"), f);
        }
    }
}
