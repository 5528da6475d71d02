//! The experiment configuration file: schema, defaults, validation,
//! fingerprinting and dotted-key overrides.
//!
//! Relative paths in the file are resolved against the directory holding it.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::eval::{PostStep, ThresholdCriterion, UncertaintyMeasure, UncertaintyMode};
use crate::losses::LossSpec;
use crate::models::{Architecture, ModelSpec};
use crate::transforms::{TransformKind, TransformSpec};
use crate::volume::{ExtractMode, UnitSpec};

pub const SCHEMA_VERSION: u32 = 1;

/// Environment variable naming the compute device of a run.
pub const DEVICE_ENV: &str = "SEGKIT_DEVICE";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{file}: at `{key}` (line {line}, column {column}): {msg}")]
    Parse {
        file: String,
        key: String,
        line: usize,
        column: usize,
        msg: String,
    },
    #[error("invalid `{key}`: {msg}")]
    Invalid { key: String, msg: String },
    #[error("invalid override `{key}`: {msg}")]
    Override { key: String, msg: String },
}

fn invalid<T>(key: &str, msg: impl Into<String>) -> Result<T, ConfigError> {
    Err(ConfigError::Invalid {
        key: key.to_string(),
        msg: msg.into(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct ContrastConfig {
    pub train_validation: Vec<String>,
    /// Empty means the same as `train_validation`.
    pub test: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoaderConfig {
    pub bids_path: PathBuf,
    #[serde(default = "default_suffixes")]
    pub target_suffix: Vec<String>,
    pub contrasts: ContrastConfig,
    #[serde(default = "default_mode")]
    pub mode: ExtractMode,
    #[serde(default = "default_axis")]
    pub slice_axis: usize,
    #[serde(default)]
    pub patch_shape: Option<[usize; 3]>,
    /// Defaults to `patch_shape` (no overlap).
    #[serde(default)]
    pub stride: Option<[usize; 3]>,
    /// Stack all contrasts of a session as channels of one input.
    #[serde(default)]
    pub multichannel: bool,
    /// Metadata key whose strata are sampled with equal total weight.
    #[serde(default)]
    pub balance_key: Option<String>,
    #[serde(default)]
    pub metadata_filter: BTreeMap<String, Vec<String>>,
}

fn default_suffixes() -> Vec<String> {
    vec!["seg".to_string()]
}
fn default_mode() -> ExtractMode {
    ExtractMode::Slice
}
fn default_axis() -> usize {
    2
}

impl LoaderConfig {
    pub fn unit_spec(&self) -> UnitSpec {
        match self.mode {
            ExtractMode::Volume => UnitSpec::volume(),
            ExtractMode::Slice => UnitSpec::slices(self.slice_axis),
            ExtractMode::Patch => {
                let p = self.patch_shape.unwrap_or([1, 1, 1]);
                UnitSpec::patches(p, self.stride.unwrap_or(p))
            }
        }
    }

    pub fn test_contrasts(&self) -> &[String] {
        if self.contrasts.test.is_empty() {
            &self.contrasts.train_validation
        } else {
            &self.contrasts.test
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitConfig {
    pub fractions: [f64; 3],
    pub seed: u64,
    pub split_key: Option<String>,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            fractions: [0.6, 0.2, 0.2],
            seed: 0,
            split_key: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CurriculumConfig {
    /// Share of the epochs trained with every modality present.
    pub warmup_fraction: f64,
    pub p_max: f64,
}

impl Default for CurriculumConfig {
    fn default() -> Self {
        CurriculumConfig {
            warmup_fraction: 0.5,
            p_max: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub loss: LossSpec,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Beta parameter of the mixup coefficient distribution; `None` is off.
    pub mixup_beta: Option<f64>,
    /// Regex over parameter names excluded from optimization.
    pub freeze_pattern: Option<String>,
    pub deterministic: bool,
    /// Checkpoint file to continue from.
    pub resume: Option<PathBuf>,
    /// Model directory whose matching parameters initialize the network.
    pub pretrained: Option<PathBuf>,
    pub seed: u64,
    pub curriculum: CurriculumConfig,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            loss: LossSpec::default(),
            lr: 1e-3,
            epochs: 10,
            batch_size: 8,
            mixup_beta: None,
            freeze_pattern: None,
            deterministic: true,
            resume: None,
            pretrained: None,
            seed: 0,
            curriculum: CurriculumConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CascadeConfig {
    /// Model directory of the detection stage.
    pub detector: PathBuf,
    #[serde(default = "default_margin")]
    pub margin: usize,
    #[serde(default = "half")]
    pub threshold: f64,
}

fn default_margin() -> usize {
    2
}
fn half() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UncertaintyConfig {
    pub mode: Option<UncertaintyMode>,
    pub n: usize,
    pub measures: Vec<UncertaintyMeasure>,
    pub seed: u64,
}

impl Default for UncertaintyConfig {
    fn default() -> Self {
        UncertaintyConfig {
            mode: None,
            n: 10,
            measures: vec![UncertaintyMeasure::Entropy],
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Keyword {
    Search,
}

/// A fixed threshold or `"search"` for a grid search on the validation set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ThresholdSetting {
    Value(f64),
    Keyword(Keyword),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluationConfig {
    pub threshold: ThresholdSetting,
    pub search_step: f64,
    pub criterion: ThresholdCriterion,
    /// Object size bin edges in mm³; empty disables binned rows.
    pub bins_mm3: Vec<f64>,
    /// Applied after thresholding.
    pub postprocess: Vec<PostStep>,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        EvaluationConfig {
            threshold: ThresholdSetting::Value(0.5),
            search_step: 0.05,
            criterion: ThresholdCriterion::MetricMax,
            bins_mm3: Vec::new(),
            postprocess: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    pub path: PathBuf,
    #[serde(default = "yes")]
    pub save_curves: bool,
    #[serde(default)]
    pub save_qc: bool,
}

fn yes() -> bool {
    true
}

fn schema_version() -> u32 {
    SCHEMA_VERSION
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "schema_version")]
    pub schema_version: u32,
    pub loader: LoaderConfig,
    #[serde(default)]
    pub split: SplitConfig,
    #[serde(default)]
    pub transforms: Vec<TransformSpec>,
    #[serde(default)]
    pub model: ModelSpec,
    #[serde(default)]
    pub training: TrainingConfig,
    #[serde(default)]
    pub cascade: Option<CascadeConfig>,
    #[serde(default)]
    pub uncertainty: UncertaintyConfig,
    #[serde(default)]
    pub evaluation: EvaluationConfig,
    pub output: OutputConfig,
}

impl ExperimentConfig {
    /// Deterministic steps run once per volume.
    pub fn preprocessing(&self) -> Vec<TransformSpec> {
        self.transforms.iter().filter(|t| t.kind.is_preprocessing()).cloned().collect()
    }

    /// Random steps run per training unit.
    pub fn augmentation(&self) -> Vec<TransformSpec> {
        self.transforms.iter().filter(|t| !t.kind.is_preprocessing()).cloned().collect()
    }

    /// Augmentations usable for test-time sampling.
    pub fn tta(&self) -> Vec<TransformSpec> {
        self.augmentation()
            .into_iter()
            .filter(|t| matches!(t.kind, TransformKind::AffineAugment { .. }))
            .collect()
    }

    pub fn to_value(&self) -> Value {
        serde_json::to_value(self).expect("config serializes")
    }

    /// SHA-256 of the canonical (sorted-key, defaulted) JSON, ignoring the
    /// resume path.
    pub fn fingerprint(&self) -> String {
        let mut v = self.to_value();
        if let Some(t) = v.get_mut("training").and_then(Value::as_object_mut) {
            t.remove("resume");
        }
        let text = serde_json::to_string(&v).expect("config serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }

    /// Fills dependent defaults, resolves relative paths against `base` and
    /// runs every cross-field check.
    pub fn finalize(mut self, base: Option<&Path>) -> Result<Self, ConfigError> {
        if let Some(base) = base {
            let fix = |p: &mut PathBuf| {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            };
            fix(&mut self.loader.bids_path);
            fix(&mut self.output.path);
            if let Some(c) = self.cascade.as_mut() {
                fix(&mut c.detector);
            }
            if let Some(p) = self.training.resume.as_mut() {
                fix(p);
            }
            if let Some(p) = self.training.pretrained.as_mut() {
                fix(p);
            }
        }
        if self.loader.mode == ExtractMode::Patch && self.loader.stride.is_none() {
            self.loader.stride = self.loader.patch_shape;
        }
        self.model = self.model.with_defaults();
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.schema_version != SCHEMA_VERSION {
            return invalid("schema_version", format!("unsupported version {} (this build reads {SCHEMA_VERSION})", self.schema_version));
        }
        let l = &self.loader;
        if l.target_suffix.is_empty() {
            return invalid("loader.target_suffix", "needs at least one suffix");
        }
        if l.contrasts.train_validation.is_empty() {
            return invalid("loader.contrasts.train_validation", "needs at least one contrast");
        }
        if l.slice_axis > 2 {
            return invalid("loader.slice_axis", format!("must be 0, 1 or 2, got {}", l.slice_axis));
        }
        match (l.mode, l.patch_shape) {
            (ExtractMode::Patch, None) => return invalid("loader.patch_shape", "required when loader.mode is patch"),
            (ExtractMode::Patch, Some(p)) => {
                if p.contains(&0) {
                    return invalid("loader.patch_shape", "entries must be positive");
                }
                let s = l.stride.unwrap_or(p);
                if s.iter().zip(&p).any(|(s, p)| *s == 0 || s > p) {
                    return invalid("loader.stride", "entries must be in 1..=patch_shape");
                }
            }
            (_, Some(_)) => return invalid("loader.patch_shape", "only allowed when loader.mode is patch"),
            (_, None) => {
                if l.stride.is_some() {
                    return invalid("loader.stride", "only allowed when loader.mode is patch");
                }
            }
        }
        let fr = self.split.fractions;
        if fr.iter().any(|f| !(0.0..=1.0).contains(f)) || (fr.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
            return invalid("split.fractions", format!("must be three values in [0,1] summing to 1, got {fr:?}"));
        }

        let m = &self.model;
        m.validate().map_err(|e| ConfigError::Invalid {
            key: "model".into(),
            msg: e.to_string(),
        })?;
        if m.dims() == 2 && l.mode != ExtractMode::Slice {
            return invalid("loader.mode", format!("a 2D {} needs slice mode", m.architecture.name()));
        }
        if m.dims() == 3 && l.mode == ExtractMode::Slice {
            return invalid("loader.mode", format!("a 3D {} needs volume or patch mode", m.architecture.name()));
        }
        if m.out_classes != l.target_suffix.len() {
            return invalid(
                "model.out_classes",
                format!("must equal the number of target suffixes ({})", l.target_suffix.len()),
            );
        }
        let channels = if l.multichannel { l.contrasts.train_validation.len() } else { 1 };
        if m.in_channels != channels {
            return invalid("model.in_channels", format!("must be {channels} for this loader configuration"));
        }
        if l.multichannel && l.test_contrasts() != l.contrasts.train_validation.as_slice() {
            return invalid("loader.contrasts.test", "multichannel loading needs the same contrasts for every split");
        }
        if m.architecture == Architecture::HemisUnet && !l.multichannel {
            return invalid("loader.multichannel", "hemis_unet needs multichannel loading");
        }

        let t = &self.training;
        t.loss.validate().map_err(|e| ConfigError::Invalid {
            key: "training.loss".into(),
            msg: e.to_string(),
        })?;
        if !(t.lr > 0.0 && t.lr.is_finite()) {
            return invalid("training.lr", format!("must be positive, got {}", t.lr));
        }
        if t.epochs == 0 {
            return invalid("training.epochs", "must be at least 1");
        }
        if t.batch_size == 0 {
            return invalid("training.batch_size", "must be at least 1");
        }
        if let Some(b) = t.mixup_beta {
            if !(b > 0.0 && b.is_finite()) {
                return invalid("training.mixup_beta", format!("must be positive, got {b}"));
            }
            if t.batch_size < 2 {
                return invalid("training.mixup_beta", "mixup needs training.batch_size >= 2");
            }
        }
        if let Some(p) = &t.freeze_pattern {
            if let Err(e) = regex::Regex::new(p) {
                return invalid("training.freeze_pattern", e.to_string());
            }
        }
        let c = &t.curriculum;
        if !(0.0..1.0).contains(&c.p_max) {
            return invalid("training.curriculum.p_max", format!("must be in [0, 1), got {}", c.p_max));
        }
        if !(0.0..=1.0).contains(&c.warmup_fraction) {
            return invalid("training.curriculum.warmup_fraction", format!("must be in [0, 1], got {}", c.warmup_fraction));
        }

        if let Some(c) = &self.cascade {
            if !(0.0..=1.0).contains(&c.threshold) {
                return invalid("cascade.threshold", "must be in [0, 1]");
            }
        }
        let u = &self.uncertainty;
        if let Some(mode) = u.mode {
            if u.n < 2 {
                return invalid("uncertainty.n", format!("must be at least 2, got {}", u.n));
            }
            if mode == UncertaintyMode::Epistemic && m.dropout_rate <= 0.0 {
                return invalid("uncertainty.mode", "epistemic sampling needs model.dropout_rate > 0");
            }
            if mode == UncertaintyMode::Aleatoric && self.tta().is_empty() {
                return invalid("uncertainty.mode", "aleatoric sampling needs an affine_augment transform");
            }
            if u.measures.is_empty() {
                return invalid("uncertainty.measures", "needs at least one measure");
            }
        }
        let e = &self.evaluation;
        match e.threshold {
            ThresholdSetting::Value(v) if !(0.0..=1.0).contains(&v) => return invalid("evaluation.threshold", format!("must be in [0, 1], got {v}")),
            _ => {}
        }
        if !(e.search_step > 0.0 && e.search_step < 1.0) {
            return invalid("evaluation.search_step", format!("must be in (0, 1), got {}", e.search_step));
        }
        if e.bins_mm3.windows(2).any(|w| w[0] >= w[1]) || e.bins_mm3.iter().any(|b| !(*b > 0.0)) {
            return invalid("evaluation.bins_mm3", "edges must be positive and strictly increasing");
        }
        let needs_unc = e.postprocess.iter().any(|s| matches!(s, PostStep::UncertaintyThreshold { .. }));
        if needs_unc && u.mode.is_none() {
            return invalid("evaluation.postprocess", "uncertainty_threshold needs uncertainty.mode");
        }
        Ok(())
    }
}

/// Parses and validates configuration text. `base` resolves relative paths.
pub fn parse_config(text: &str, file: &str, base: Option<&Path>) -> Result<ExperimentConfig, ConfigError> {
    let mut de = serde_json::Deserializer::from_str(text);
    let cfg: ExperimentConfig = serde_path_to_error::deserialize(&mut de).map_err(|e| {
        let key = e.path().to_string();
        let inner = e.into_inner();
        ConfigError::Parse {
            file: file.to_string(),
            key,
            line: inner.line(),
            column: inner.column(),
            msg: inner.to_string(),
        }
    })?;
    cfg.finalize(base)
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig, ConfigError> {
    let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let base = path.parent().map(|p| if p.as_os_str().is_empty() { Path::new(".") } else { p });
    parse_config(&text, &path.display().to_string(), base)
}

/// Replaces the value at dotted `key` (array positions as numbers). The key
/// must already exist in the defaulted configuration.
pub fn apply_override(config: &mut Value, key: &str, value: Value) -> Result<(), ConfigError> {
    let bad = |msg: String| ConfigError::Override { key: key.to_string(), msg };
    let mut cur = config;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let next = match cur {
            Value::Object(map) => map.get_mut(*part),
            Value::Array(items) => part.parse::<usize>().ok().and_then(|k| items.get_mut(k)),
            _ => None,
        };
        cur = next.ok_or_else(|| bad(format!("`{}` is not a configuration key", parts[..=i].join("."))))?;
    }
    *cur = value;
    Ok(())
}

/// Applies overrides to a base configuration and re-validates the result.
pub fn with_overrides(base: &ExperimentConfig, overrides: &BTreeMap<String, Value>) -> Result<ExperimentConfig, ConfigError> {
    let mut v = base.to_value();
    for (k, val) in overrides {
        apply_override(&mut v, k, val.clone())?;
    }
    let text = serde_json::to_string(&v).expect("value serializes");
    parse_config(&text, "override", None)
}

/// Device requested through [`DEVICE_ENV`], `cpu` when unset.
pub fn device() -> String {
    std::env::var(DEVICE_ENV).ok().filter(|s| !s.trim().is_empty()).unwrap_or_else(|| "cpu".to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn minimal() -> Value {
        json!({
            "loader": {"bids_path": "data", "contrasts": {"train_validation": ["T1w"]}},
            "output": {"path": "out"}
        })
    }

    fn parse(v: &Value) -> Result<ExperimentConfig, ConfigError> {
        parse_config(&v.to_string(), "cfg.json", Some(Path::new("/base")))
    }

    #[test]
    fn minimal_gets_defaults() {
        let cfg = parse(&minimal()).unwrap();
        assert_eq!(cfg.schema_version, 1);
        assert_eq!(cfg.loader.bids_path, PathBuf::from("/base/data"));
        assert_eq!(cfg.loader.target_suffix, vec!["seg"]);
        assert_eq!(cfg.loader.mode, ExtractMode::Slice);
        assert_eq!(cfg.split.fractions, [0.6, 0.2, 0.2]);
        assert_eq!(cfg.training.lr, 1e-3);
        assert_eq!(cfg.model.spatial_dims, Some(2));
        assert_eq!(cfg.evaluation.threshold, ThresholdSetting::Value(0.5));
        assert!(cfg.output.save_curves);
    }

    #[test]
    fn typo_names_the_key() {
        let mut v = minimal();
        v["trainin"] = json!({});
        let err = parse(&v).unwrap_err().to_string();
        assert!(err.contains("trainin"), "{err}");

        let mut v = minimal();
        v["training"] = json!({"lr": 0.1, "epoch": 3});
        let err = parse(&v).unwrap_err().to_string();
        assert!(err.contains("training") && err.contains("epoch"), "{err}");

        let mut v = minimal();
        v["training"] = json!({"lr": "fast"});
        let err = parse(&v).unwrap_err().to_string();
        assert!(err.contains("training.lr"), "{err}");
    }

    #[test]
    fn cross_field_rules() {
        let mut v = minimal();
        v["loader"]["mode"] = json!("patch");
        v["model"] = json!({"architecture": "unet3d"});
        let err = parse(&v).unwrap_err().to_string();
        assert!(err.contains("loader.patch_shape"), "{err}");

        v["loader"]["patch_shape"] = json!([8, 8, 8]);
        let cfg = parse(&v).unwrap();
        assert_eq!(cfg.loader.stride, Some([8, 8, 8]));

        let mut v = minimal();
        v["loader"]["mode"] = json!("volume");
        assert!(parse(&v).unwrap_err().to_string().contains("loader.mode"));

        let mut v = minimal();
        v["model"] = json!({"film_metadata_key": "site"});
        assert!(parse(&v).unwrap_err().to_string().contains("film_unet"));

        let mut v = minimal();
        v["loader"]["target_suffix"] = json!(["seg", "lesion"]);
        assert!(parse(&v).unwrap_err().to_string().contains("model.out_classes"));

        let mut v = minimal();
        v["model"] = json!({"architecture": "hemis_unet", "in_channels": 1});
        assert!(parse(&v).unwrap_err().to_string().contains("loader.multichannel"));

        let mut v = minimal();
        v["schema_version"] = json!(2);
        assert!(parse(&v).unwrap_err().to_string().contains("schema_version"));

        let mut v = minimal();
        v["evaluation"] = json!({"threshold": "search"});
        assert_eq!(parse(&v).unwrap().evaluation.threshold, ThresholdSetting::Keyword(Keyword::Search));
    }

    #[test]
    fn fingerprint_ignores_key_order_and_resume() {
        let a = r#"{"output": {"path": "o"}, "loader": {"contrasts": {"train_validation": ["T1w"]}, "bids_path": "d"}, "training": {"lr": 0.01, "epochs": 2}}"#;
        let b = r#"{"training": {"epochs": 2, "lr": 0.01, "resume": "x"}, "loader": {"bids_path": "d", "contrasts": {"train_validation": ["T1w"]}}, "output": {"path": "o"}}"#;
        let fa = parse_config(a, "a", None).unwrap().fingerprint();
        let fb = parse_config(b, "b", None).unwrap().fingerprint();
        assert_eq!(fa, fb);
        let c = a.replace("0.01", "0.02");
        assert_ne!(fa, parse_config(&c, "c", None).unwrap().fingerprint());
    }

    #[test]
    fn overrides() {
        let base = parse(&minimal()).unwrap();
        let mut o = BTreeMap::new();
        o.insert("training.lr".to_string(), json!(0.05));
        o.insert("training.mixup_beta".to_string(), json!(0.4));
        let cfg = with_overrides(&base, &o).unwrap();
        assert_eq!(cfg.training.lr, 0.05);
        assert_eq!(cfg.training.mixup_beta, Some(0.4));

        let mut o = BTreeMap::new();
        o.insert("training.learning_rate".to_string(), json!(0.05));
        let err = with_overrides(&base, &o).unwrap_err();
        assert!(matches!(err, ConfigError::Override { .. }), "{err}");
    }
}
