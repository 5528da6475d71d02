use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};

use super::data::{index_and_split, load_volumes, LoadedVolume};
use super::{io_err, TrainError};
use crate::bids::parse_sidecar;
use crate::config::{ExperimentConfig, ThresholdSetting};
use crate::eval::{
    compute_metrics, mean_dice, object_scores, optimal_threshold, postprocess, sample_predictions, segment_volume, size_binned_metrics, voxel_uncertainty,
    write_report, EvalRow, InferenceSettings, PostStep, PredictionSet, SamplingOverrides,
};
use crate::meta::Metadata;
use crate::models::{cascade_predict, Model};
use crate::transforms::{apply_pipeline, derive_seed, restore_native, Sample};
use crate::volume::{read_nifti, write_nifti, UnitSpec, Volume};

pub fn inference_settings(cfg: &ExperimentConfig, metadata: Metadata, availability: Option<Vec<bool>>) -> InferenceSettings {
    InferenceSettings {
        units: cfg.loader.unit_spec(),
        preprocessing: cfg.preprocessing(),
        tta: cfg.tta(),
        metadata,
        availability,
    }
}

fn detector_units(detector: &Model, fallback: UnitSpec) -> UnitSpec {
    detector
        .config
        .as_ref()
        .and_then(|v| serde_json::from_value::<ExperimentConfig>(v.clone()).ok())
        .map(|c| c.loader.unit_spec())
        .unwrap_or(fallback)
}

/// Soft prediction on the native grid, plus the sample set when
/// uncertainty estimation is configured.
fn predict(
    cfg: &ExperimentConfig,
    model: &mut Model,
    detector: Option<&mut Model>,
    image: &Volume,
    id: &str,
    metadata: &Metadata,
    availability: Option<&[bool]>,
) -> Result<(Volume, Option<PredictionSet>), TrainError> {
    let settings = inference_settings(cfg, metadata.clone(), availability.map(<[bool]>::to_vec));
    if let (Some(det), Some(c)) = (detector, &cfg.cascade) {
        let (pre, records) = apply_pipeline(&Sample::from_volume(image, None), &settings.preprocessing, 0)?;
        let pre = pre.image_volume()?;
        let det_units = detector_units(det, settings.units.clone());
        let out = cascade_predict(&pre, det, &det_units, model, &settings.units, c.margin, metadata, c.threshold as f32)?;
        let native = restore_native(&out.soft.data, &records)?;
        return Ok((Volume::new(native, image.spacing, image.affine)?, None));
    }
    match cfg.uncertainty.mode {
        Some(mode) => {
            let seed = derive_seed(cfg.uncertainty.seed, id, 0);
            let mut pset = sample_predictions(model, image, mode, cfg.uncertainty.n, &settings, seed, SamplingOverrides::default())?;
            pset.volume_id = id.to_string();
            Ok((pset.mean.clone(), Some(pset)))
        }
        None => Ok((segment_volume(model, image, &settings)?, None)),
    }
}

fn load_detector(cfg: &ExperimentConfig) -> Result<Option<Model>, TrainError> {
    Ok(match &cfg.cascade {
        Some(c) => Some(Model::load(&c.detector)?),
        None => None,
    })
}

fn search_threshold(cfg: &ExperimentConfig, model: &mut Model, detector: &mut Option<Model>, val: &[LoadedVolume]) -> Result<f64, TrainError> {
    let mut softs = Vec::new();
    let mut gts = Vec::new();
    let mut plain = cfg.clone();
    plain.uncertainty.mode = None;
    for v in val {
        if let Some(label) = &v.label {
            softs.push(predict(&plain, model, detector.as_mut(), &v.image, &v.id, &v.metadata, Some(&v.availability))?.0);
            gts.push(label.clone());
        }
    }
    if softs.is_empty() {
        return Err(TrainError::EmptyBucket("labeled validation"));
    }
    Ok(optimal_threshold(&softs, &gts, cfg.evaluation.search_step, cfg.evaluation.criterion)?)
}

#[derive(Debug, Clone)]
pub struct TestReport {
    pub rows: Vec<EvalRow>,
    pub mean_dice: f64,
    pub threshold: f64,
    pub predictions: Vec<PathBuf>,
}

/// Evaluates `model_dir` on the test bucket. Writes `results_eval.csv`,
/// per-subject predictions and uncertainty maps under `output.path`.
pub fn run_test(cfg: &ExperimentConfig, model_dir: &Path) -> Result<TestReport, TrainError> {
    let mut model = Model::load(model_dir)?;
    let mut detector = load_detector(cfg)?;
    let ds = index_and_split(cfg)?;
    if ds.split.test.is_empty() {
        return Err(TrainError::EmptyBucket("test"));
    }
    let threshold = match cfg.evaluation.threshold {
        ThresholdSetting::Value(t) => t,
        ThresholdSetting::Keyword(_) => {
            let val = load_volumes(cfg, &ds.records, &ds.split.validation, &cfg.loader.contrasts.train_validation)?;
            let t = search_threshold(cfg, &mut model, &mut detector, &val)?;
            info!("threshold search selected {t}");
            t
        }
    };
    let test = load_volumes(cfg, &ds.records, &ds.split.test, cfg.loader.test_contrasts())?;
    let out = &cfg.output.path;
    let pred_dir = out.join("predictions");
    fs::create_dir_all(&pred_dir).map_err(io_err(&pred_dir))?;
    let mut steps = vec![PostStep::Threshold { value: threshold }];
    steps.extend(cfg.evaluation.postprocess.iter().cloned());

    let mut rows = Vec::new();
    let mut predictions = Vec::new();
    let mut objects = String::from("subject_id,class,object_id,score,voxels,volume_mm3\n");
    for v in &test {
        let (soft, pset) = predict(cfg, &mut model, detector.as_mut(), &v.image, &v.id, &v.metadata, Some(&v.availability))?;
        let mut first_unc = None;
        if let Some(pset) = &pset {
            for m in &cfg.uncertainty.measures {
                let unc = voxel_uncertainty(pset, *m)?;
                let p = pred_dir.join(format!("{}_unc-{}.nii.gz", v.id, m.name()));
                write_nifti(&unc, &p)?;
                if first_unc.is_none() {
                    first_unc = Some(unc);
                }
            }
        }
        let binary = postprocess(&soft, &steps, first_unc.as_ref())?;
        if let Some(unc) = &first_unc {
            for o in object_scores(unc, &binary)? {
                objects.push_str(&format!("{},{},{},{},{},{}\n", v.id, o.class_index, o.object_id, o.score, o.voxels, o.volume_mm3));
            }
        }
        let p = pred_dir.join(format!("{}_pred.nii.gz", v.id));
        write_nifti(&binary, &p)?;
        predictions.push(p);
        match &v.label {
            Some(label) => {
                rows.extend(compute_metrics(&v.id, &binary, label)?);
                if !cfg.evaluation.bins_mm3.is_empty() {
                    rows.extend(size_binned_metrics(&v.id, &binary, label, &cfg.evaluation.bins_mm3)?);
                }
            }
            None => warn!("{}: no labels, prediction written without metrics", v.id),
        }
    }
    write_report(&rows, &out.join("results_eval.csv"))?;
    if cfg.uncertainty.mode.is_some() {
        let p = out.join("object_uncertainty.csv");
        fs::write(&p, objects).map_err(io_err(&p))?;
    }
    let md = mean_dice(&rows);
    info!("test mean dice {md:.4} over {} volumes", test.len());
    Ok(TestReport {
        rows,
        mean_dice: md,
        threshold,
        predictions,
    })
}

/// Segments one image with the model's stored configuration and writes a
/// binary mask on the input grid.
pub fn segment_file(input: &Path, model_dir: &Path, output: &Path) -> Result<(), TrainError> {
    let mut model = Model::load(model_dir)?;
    let image = read_nifti(input)?;
    let metadata = parse_sidecar(input).unwrap_or_default();
    let cfg = match &model.config {
        Some(v) => Some(serde_json::from_value::<ExperimentConfig>(v.clone()).map_err(|e| TrainError::Data(format!("stored config: {e}")))?),
        None => None,
    };
    let binary = match cfg {
        Some(cfg) => {
            let mut detector = load_detector(&cfg)?;
            let mut plain = cfg.clone();
            plain.uncertainty.mode = None;
            let (soft, _) = predict(&plain, &mut model, detector.as_mut(), &image, "segment", &metadata, None)?;
            let t = match cfg.evaluation.threshold {
                ThresholdSetting::Value(t) => t,
                ThresholdSetting::Keyword(_) => 0.5,
            };
            let mut steps = vec![PostStep::Threshold { value: t }];
            steps.extend(cfg.evaluation.postprocess.iter().filter(|s| !matches!(s, PostStep::UncertaintyThreshold { .. })).cloned());
            postprocess(&soft, &steps, None)?
        }
        None => {
            let units = if model.spec().dims() == 2 { UnitSpec::slices(2) } else { UnitSpec::volume() };
            let settings = InferenceSettings {
                metadata,
                ..InferenceSettings::new(units)
            };
            let soft = segment_volume(&mut model, &image, &settings)?;
            postprocess(&soft, &[PostStep::Threshold { value: 0.5 }], None)?
        }
    };
    if let Some(dir) = output.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    write_nifti(&binary, output)?;
    Ok(())
}
