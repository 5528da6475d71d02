//! Segmentation networks, their on-disk format and volume-level inference.

mod attention;
mod cascade;
mod film;
mod hemis;
mod segnet;
mod spec;

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use ndarray::{s, Array4};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub use attention::AttentionGate;
pub use cascade::{cascade_predict, CascadeOutput};
pub use film::{FilmGenerator, FilmParams, MetadataVector, MetadataVocabulary, VocabularyKind, FILM_HIDDEN};
pub use hemis::{hemis_fuse, hemis_fuse_backward};
pub use segnet::{ConvBlock, ForwardCtx, SegNet};
pub use spec::{Architecture, ModelSpec};

use crate::meta::Metadata;
use crate::nn::{film_modulate, Parameterized, Tensor};
use crate::volume::{extract_units, reconstruct_volume, SampleUnit, UnitError, UnitSpec, Volume, VolumeError};

pub const MODEL_FORMAT: &str = "segkit-model 1";
const PARAM_MAGIC: &[u8; 8] = b"SGKPARAM";

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model spec field `{field}`: {msg}")]
    InvalidSpec { field: String, msg: String },
    #[error("shape error: {0}")]
    Shape(String),
    #[error("sample {0} has no available modality")]
    NoModality(usize),
    #[error("unsupported model format `{0}` (expected `{MODEL_FORMAT}`)")]
    UnknownVersion(String),
    #[error("model file {path}: {msg}")]
    Format { path: PathBuf, msg: String },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Units(#[from] UnitError),
    #[error(transparent)]
    Volume(#[from] VolumeError),
}

/// Checked per-channel modulation `γ·x + β` for a single-sample tensor.
pub fn film_apply(features: &Tensor, params_gamma: &[f32], params_beta: &[f32]) -> Result<Tensor, ModelError> {
    let need = features.n() * features.c();
    if params_gamma.len() != need || params_beta.len() != need {
        return Err(ModelError::Shape(format!(
            "FiLM vectors have lengths {}/{} for {} channels",
            params_gamma.len(),
            params_beta.len(),
            need
        )));
    }
    Ok(film_modulate(features, params_gamma, params_beta))
}

/// A network plus what is needed to feed it at inference time.
#[derive(Debug, Clone)]
pub struct Model {
    pub net: SegNet,
    pub vocabulary: Option<MetadataVocabulary>,
    /// Experiment configuration the model was trained with, kept so that
    /// inference can replay the same preprocessing.
    pub config: Option<serde_json::Value>,
}

/// Builds a network with He-initialized weights and checks the shape
/// contract with a probe pass.
pub fn build_model(spec: &ModelSpec, seed: u64) -> Result<Model, ModelError> {
    Ok(Model {
        net: SegNet::new(spec, seed)?,
        vocabulary: None,
        config: None,
    })
}

/// Serializes all parameters in visit order.
pub fn params_to_bytes<P: Parameterized + ?Sized>(model: &mut P) -> Vec<u8> {
    let mut out = PARAM_MAGIC.to_vec();
    let mut entries: Vec<(String, Vec<usize>, Vec<f32>)> = Vec::new();
    model.visit_params("", &mut |name, p| entries.push((name.to_string(), p.shape.clone(), p.value.clone())));
    out.extend((entries.len() as u32).to_le_bytes());
    for (name, shape, value) in entries {
        out.extend((name.len() as u32).to_le_bytes());
        out.extend(name.as_bytes());
        out.extend((shape.len() as u32).to_le_bytes());
        for d in shape {
            out.extend((d as u32).to_le_bytes());
        }
        for v in value {
            out.extend(v.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], String> {
        if self.pos + n > self.buf.len() {
            return Err(format!("truncated at byte {}", self.pos));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Loads parameters by name; every parameter of `model` must be present
/// with the same shape.
pub fn params_from_bytes<P: Parameterized + ?Sized>(model: &mut P, bytes: &[u8]) -> Result<(), String> {
    let mut c = Cursor { buf: bytes, pos: 0 };
    if c.take(8)? != PARAM_MAGIC {
        return Err("bad parameter blob magic".into());
    }
    let count = c.u32()? as usize;
    let mut stored = std::collections::HashMap::new();
    for _ in 0..count {
        let len = c.u32()? as usize;
        let name = String::from_utf8(c.take(len)?.to_vec()).map_err(|_| "parameter name is not UTF-8".to_string())?;
        let ndim = c.u32()? as usize;
        let shape: Vec<usize> = (0..ndim).map(|_| c.u32().map(|d| d as usize)).collect::<Result<_, _>>()?;
        let n: usize = shape.iter().product();
        let raw = c.take(4 * n)?;
        let vals: Vec<f32> = raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
        stored.insert(name, (shape, vals));
    }
    if c.pos != bytes.len() {
        return Err(format!("{} trailing bytes", bytes.len() - c.pos));
    }
    let mut err = None;
    model.visit_params("", &mut |name, p| {
        if err.is_some() {
            return;
        }
        match stored.get(name) {
            Some((shape, vals)) if *shape == p.shape => p.value.clone_from(vals),
            Some((shape, _)) => err = Some(format!("parameter {name} has shape {shape:?}, expected {:?}", p.shape)),
            None => err = Some(format!("parameter {name} missing")),
        }
    });
    err.map_or(Ok(()), Err)
}

/// Copies every parameter whose name and shape match from `src` to `dst`;
/// returns the number copied.
pub fn copy_params<A: Parameterized + ?Sized, B: Parameterized + ?Sized>(src: &mut A, dst: &mut B) -> usize {
    let mut map = std::collections::HashMap::new();
    src.visit_params("", &mut |name, p| {
        map.insert(name.to_string(), (p.shape.clone(), p.value.clone()));
    });
    let mut copied = 0;
    dst.visit_params("", &mut |name, p| {
        if let Some((shape, v)) = map.get(name) {
            if *shape == p.shape {
                p.value.clone_from(v);
                copied += 1;
            }
        }
    });
    copied
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ModelError + '_ {
    move |source| ModelError::Io { path: path.to_path_buf(), source }
}

impl Model {
    pub fn spec(&self) -> &ModelSpec {
        &self.net.spec
    }

    /// Writes `format`, `model_spec.json`, `params.bin`, `vocabulary.json`
    /// and, when present, `config.json` into `dir`.
    pub fn save(&mut self, dir: &Path) -> Result<(), ModelError> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let write = |name: &str, bytes: &[u8]| -> Result<(), ModelError> {
            let p = dir.join(name);
            let mut f = fs::File::create(&p).map_err(io_err(&p))?;
            f.write_all(bytes).map_err(io_err(&p))
        };
        write("format", format!("{MODEL_FORMAT}\n").as_bytes())?;
        write("model_spec.json", serde_json::to_string_pretty(&self.net.spec).unwrap().as_bytes())?;
        write("params.bin", &params_to_bytes(&mut self.net))?;
        write("vocabulary.json", serde_json::to_string_pretty(&self.vocabulary).unwrap().as_bytes())?;
        if let Some(cfg) = &self.config {
            write("config.json", serde_json::to_string_pretty(cfg).unwrap().as_bytes())?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Model, ModelError> {
        let read = |name: &str| -> Result<Vec<u8>, ModelError> {
            let p = dir.join(name);
            let mut buf = Vec::new();
            fs::File::open(&p).and_then(|mut f| f.read_to_end(&mut buf)).map_err(io_err(&p))?;
            Ok(buf)
        };
        let fmt_err = |name: &str, msg: String| ModelError::Format { path: dir.join(name), msg };
        let tag = String::from_utf8_lossy(&read("format")?).trim().to_string();
        if tag != MODEL_FORMAT {
            return Err(ModelError::UnknownVersion(tag));
        }
        let spec: ModelSpec = serde_json::from_slice(&read("model_spec.json")?).map_err(|e| fmt_err("model_spec.json", e.to_string()))?;
        let vocabulary: Option<MetadataVocabulary> =
            serde_json::from_slice(&read("vocabulary.json")?).map_err(|e| fmt_err("vocabulary.json", e.to_string()))?;
        let config = match read("config.json") {
            Ok(bytes) => Some(serde_json::from_slice(&bytes).map_err(|e| fmt_err("config.json", e.to_string()))?),
            Err(ModelError::Io { source, .. }) if source.kind() == std::io::ErrorKind::NotFound => None,
            Err(e) => return Err(e),
        };
        let mut net = SegNet::new(&spec, 0)?;
        params_from_bytes(&mut net, &read("params.bin")?).map_err(|m| fmt_err("params.bin", m))?;
        Ok(Model { net, vocabulary, config })
    }

    /// Builds the forward context (metadata encodings, availability) for a
    /// batch of units.
    pub fn context_for(&self, units: &[&SampleUnit], dropout: bool) -> ForwardCtx {
        let n = units.len();
        let mut ctx = self.net.neutral_ctx(n);
        ctx.dropout = dropout;
        if let (Some(vocab), Some(film)) = (&self.vocabulary, ctx.film_input.as_mut()) {
            film.clear();
            for u in units {
                film.extend(vocab.encode(u.metadata.get(&vocab.key)).encoding);
            }
        }
        if let Some(avail) = ctx.availability.as_mut() {
            for (row, u) in avail.iter_mut().zip(units) {
                if u.availability.len() == row.len() {
                    row.clone_from(&u.availability);
                }
            }
        }
        ctx
    }

    /// Stacks unit images into a network input, zero-padding each spatial
    /// dimension up to the required multiple. Returns the tensor and the
    /// unpadded spatial shape in tensor order.
    pub fn batch_tensor(&self, units: &[&SampleUnit], labels: bool) -> Result<(Tensor, [usize; 3]), ModelError> {
        let first = units.first().ok_or_else(|| ModelError::Shape("empty batch".into()))?;
        let arr = |u: &SampleUnit| -> Result<Array4<f32>, ModelError> {
            if labels {
                u.label.clone().ok_or_else(|| ModelError::Shape(format!("unit of {} has no label", u.volume_id)))
            } else {
                Ok(u.data.clone())
            }
        };
        let a0 = arr(first)?;
        let (c, a, b, d) = a0.dim();
        let spatial = if self.net.spec.dims() == 2 {
            if d != 1 {
                return Err(ModelError::Shape(format!("2D network needs slice units, got a {a}×{b}×{d} unit")));
            }
            [1, a, b]
        } else {
            [a, b, d]
        };
        let m = self.net.size_multiple();
        let padded = [0, 1, 2].map(|i| spatial[i].div_ceil(m[i]) * m[i]);
        let mut t = Tensor::zeros([units.len(), c, padded[0], padded[1], padded[2]]);
        for (i, u) in units.iter().enumerate() {
            let data = arr(u)?;
            if data.dim() != (c, a, b, d) {
                return Err(ModelError::Shape("units in a batch must share a shape".into()));
            }
            let dst = t.sample_mut(i);
            let flat = data.as_standard_layout();
            let src = flat.as_slice().unwrap();
            let (sd, sh, sw) = (spatial[0], spatial[1], spatial[2]);
            for ch in 0..c {
                for z in 0..sd {
                    for y in 0..sh {
                        let s0 = ((ch * sd + z) * sh + y) * sw;
                        let d0 = ((ch * padded[0] + z) * padded[1] + y) * padded[2];
                        dst[d0..d0 + sw].copy_from_slice(&src[s0..s0 + sw]);
                    }
                }
            }
        }
        Ok((t, spatial))
    }

    /// Crops a network output back to unit-shaped arrays.
    pub fn split_output(&self, y: &Tensor, spatial: [usize; 3], unit_shape: (usize, usize, usize)) -> Vec<Array4<f32>> {
        let [n, c, pd, ph, pw] = y.shape;
        (0..n)
            .map(|i| {
                let full = Array4::from_shape_vec((c, pd, ph, pw), y.sample(i).to_vec()).unwrap();
                let crop = full.slice(s![.., ..spatial[0], ..spatial[1], ..spatial[2]]).to_owned();
                crop.into_shape_with_order((c, unit_shape.0, unit_shape.1, unit_shape.2)).unwrap()
            })
            .collect()
    }

    /// Runs the network over units and returns one prediction per unit.
    pub fn predict_units(&mut self, units: &[SampleUnit], dropout: bool, rng: &mut ChaCha8Rng) -> Result<Vec<Array4<f32>>, ModelError> {
        const BATCH: usize = 8;
        let mut preds = Vec::with_capacity(units.len());
        let refs: Vec<&SampleUnit> = units.iter().collect();
        for chunk in refs.chunks(BATCH) {
            let (x, spatial) = self.batch_tensor(chunk, false)?;
            let ctx = self.context_for(chunk, dropout);
            let y = self.net.forward(&x, &ctx, rng)?;
            let (_, a, b, d) = chunk[0].data.dim();
            preds.extend(self.split_output(&y, spatial, (a, b, d)));
        }
        Ok(preds)
    }

    /// Extracts units, predicts each and reconstructs a soft map on the
    /// volume grid. No preprocessing is applied here.
    pub fn predict_volume(
        &mut self,
        volume: &Volume,
        units: &UnitSpec,
        metadata: &Metadata,
        dropout: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Volume, ModelError> {
        self.predict_volume_with(volume, units, metadata, None, dropout, rng)
    }

    /// [`Model::predict_volume`] with explicit modality availability; `None`
    /// treats every modality as present.
    pub fn predict_volume_with(
        &mut self,
        volume: &Volume,
        units: &UnitSpec,
        metadata: &Metadata,
        availability: Option<&[bool]>,
        dropout: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Volume, ModelError> {
        let mut list = extract_units(volume, None, units, "predict", metadata)?;
        if self.net.spec.architecture == Architecture::HemisUnet {
            let n = self.net.spec.n_modalities;
            for u in &mut list {
                u.availability = match availability {
                    Some(a) if a.len() == n => a.to_vec(),
                    _ => vec![true; n],
                };
            }
        }
        let preds = self.predict_units(&list, dropout, rng)?;
        Ok(reconstruct_volume(&list, &preds)?)
    }
}

#[cfg(test)]
mod tests;
