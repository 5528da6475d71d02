//! Metadata encoding and the FiLM parameter generator.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::ModelError;
use crate::meta::MetaValue;
use crate::nn::tensor::join;
use crate::nn::{Linear, Param, Parameterized};

pub const FILM_HIDDEN: usize = 64;

/// How one metadata key is turned into a real vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum VocabularyKind {
    /// One-hot over `categories`, with a final reserved slot for unseen values.
    Categorical { categories: Vec<String> },
    /// Single z-scored value; missing or non-numeric values encode as 0.
    Scalar { mean: f64, std: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetadataVocabulary {
    pub key: String,
    #[serde(flatten)]
    pub kind: VocabularyKind,
}

/// Encoded metadata for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct MetadataVector {
    pub encoding: Vec<f32>,
}

impl MetadataVocabulary {
    /// Builds a vocabulary from training values. All-numeric values give a
    /// scalar encoding; anything else is categorical.
    pub fn fit<'a>(key: &str, values: impl IntoIterator<Item = Option<&'a MetaValue>>) -> Self {
        let values: Vec<Option<&MetaValue>> = values.into_iter().collect();
        let present: Vec<&MetaValue> = values.iter().flatten().copied().collect();
        let numeric: Option<Vec<f64>> = present
            .iter()
            .map(|v| match v {
                MetaValue::Number(x) => Some(*x),
                _ => None,
            })
            .collect();
        let kind = match numeric {
            Some(nums) if !nums.is_empty() => {
                let mean = nums.iter().sum::<f64>() / nums.len() as f64;
                let var = nums.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / nums.len() as f64;
                let std = if var > 0.0 { var.sqrt() } else { 1.0 };
                VocabularyKind::Scalar { mean, std }
            }
            _ => {
                let mut categories: Vec<String> = present.iter().map(|v| v.to_string()).collect();
                categories.sort();
                categories.dedup();
                VocabularyKind::Categorical { categories }
            }
        };
        Self { key: key.to_string(), kind }
    }

    pub fn dim(&self) -> usize {
        match &self.kind {
            VocabularyKind::Categorical { categories } => categories.len() + 1,
            VocabularyKind::Scalar { .. } => 1,
        }
    }

    pub fn encode(&self, value: Option<&MetaValue>) -> MetadataVector {
        let encoding = match &self.kind {
            VocabularyKind::Categorical { categories } => {
                let mut v = vec![0.0; categories.len() + 1];
                let slot = value
                    .and_then(|x| categories.iter().position(|c| *c == x.to_string()))
                    .unwrap_or(categories.len());
                v[slot] = 1.0;
                v
            }
            VocabularyKind::Scalar { mean, std } => {
                let x = value.and_then(|x| x.as_f64()).map(|x| (x - mean) / std).unwrap_or(0.0);
                vec![x as f32]
            }
        };
        MetadataVector { encoding }
    }
}

/// Per modulated layer `(gamma, beta)`, each of the layer's channel count.
#[derive(Debug, Clone, PartialEq)]
pub struct FilmParams {
    pub layers: Vec<(Vec<f32>, Vec<f32>)>,
}

/// Two-layer perceptron mapping a metadata encoding to concatenated
/// `(gamma, beta)` vectors of every modulated layer.
#[derive(Debug, Clone)]
pub struct FilmGenerator {
    pub fc1: Linear,
    pub fc2: Linear,
    pub channels: Vec<usize>,
    hidden_mask: Option<Vec<bool>>,
}

impl FilmGenerator {
    pub fn new<R: Rng>(rng: &mut R, input_dim: usize, channels: Vec<usize>) -> Self {
        let fc1 = Linear::new(rng, input_dim, FILM_HIDDEN);
        let total: usize = channels.iter().map(|c| 2 * c).sum();
        let mut fc2 = Linear::new(rng, FILM_HIDDEN, total);
        let small = Normal::new(0.0, 1e-3).unwrap();
        fc2.weight.value.iter_mut().for_each(|w| *w = small.sample(rng) as f32);
        let mut off = 0;
        for c in &channels {
            fc2.bias.value[off..off + c].iter_mut().for_each(|b| *b = 1.0);
            fc2.bias.value[off + c..off + 2 * c].iter_mut().for_each(|b| *b = 0.0);
            off += 2 * c;
        }
        Self {
            fc1,
            fc2,
            channels,
            hidden_mask: None,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.fc1.fan_in
    }

    pub fn output_dim(&self) -> usize {
        self.fc2.fan_out
    }

    /// Raw `(N, output_dim)` generator output.
    pub fn forward(&mut self, encodings: &[f32], n: usize, cache: bool) -> Vec<f32> {
        let mut h = self.fc1.forward(encodings, n, cache);
        let mask: Vec<bool> = h.iter().map(|v| *v > 0.0).collect();
        h.iter_mut().for_each(|v| *v = v.max(0.0));
        if cache {
            self.hidden_mask = Some(mask);
        }
        self.fc2.forward(&h, n, cache)
    }

    pub fn backward(&mut self, dout: &[f32]) {
        let mut dh = self.fc2.backward(dout);
        let mask = self.hidden_mask.take().expect("film backward without cached forward");
        for (g, m) in dh.iter_mut().zip(mask) {
            if !m {
                *g = 0.0;
            }
        }
        self.fc1.backward(&dh);
    }

    /// Generates the FiLM parameters for one sample.
    pub fn generate(&mut self, metadata: &MetadataVector) -> Result<FilmParams, ModelError> {
        if metadata.encoding.len() != self.input_dim() {
            return Err(ModelError::Shape(format!(
                "metadata encoding has length {} but the generator expects {}",
                metadata.encoding.len(),
                self.input_dim()
            )));
        }
        let out = self.forward(&metadata.encoding, 1, false);
        let mut layers = Vec::with_capacity(self.channels.len());
        let mut off = 0;
        for c in &self.channels {
            layers.push((out[off..off + c].to_vec(), out[off + c..off + 2 * c].to_vec()));
            off += 2 * c;
        }
        Ok(FilmParams { layers })
    }
}

impl Parameterized for FilmGenerator {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.fc1.visit_params(&join(prefix, "fc1"), f);
        self.fc2.visit_params(&join(prefix, "fc2"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn categorical_one_hot_with_unknown_slot() {
        let a = MetaValue::Text("T1w".into());
        let b = MetaValue::Text("T2w".into());
        let vocab = MetadataVocabulary::fit("contrast", [Some(&a), Some(&b), Some(&a), None]);
        assert_eq!(vocab.dim(), 3);
        assert_eq!(vocab.encode(Some(&b)).encoding, vec![0.0, 1.0, 0.0]);
        let unseen = MetaValue::Text("FLAIR".into());
        assert_eq!(vocab.encode(Some(&unseen)).encoding, vec![0.0, 0.0, 1.0]);
        for v in [Some(&a), Some(&b), Some(&unseen), None] {
            assert_eq!(vocab.encode(v).encoding.iter().sum::<f32>(), 1.0);
        }
    }

    #[test]
    fn scalar_encoding_is_standardized() {
        let vals: Vec<MetaValue> = [20.0, 40.0].iter().map(|v| MetaValue::Number(*v)).collect();
        let vocab = MetadataVocabulary::fit("age", vals.iter().map(Some));
        assert_eq!(vocab.encode(Some(&MetaValue::Number(40.0))).encoding, vec![1.0]);
        assert_eq!(vocab.encode(None).encoding, vec![0.0]);
    }

    #[test]
    fn fresh_generator_is_near_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut gen = FilmGenerator::new(&mut rng, 4, vec![8, 16]);
        for k in 0..4 {
            let mut enc = vec![0.0; 4];
            enc[k] = 1.0;
            let p = gen.generate(&MetadataVector { encoding: enc.clone() }).unwrap();
            assert_eq!(p.layers.len(), 2);
            assert_eq!(p.layers[0].0.len(), 8);
            assert_eq!(p.layers[1].1.len(), 16);
            for (g, b) in &p.layers {
                assert!(g.iter().all(|v| (v - 1.0).abs() <= 0.1));
                assert!(b.iter().all(|v| v.abs() <= 0.1));
            }
            assert_eq!(p, gen.generate(&MetadataVector { encoding: enc }).unwrap());
        }
        assert!(gen.generate(&MetadataVector { encoding: vec![0.0; 3] }).is_err());
    }
}
