use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};
use ndarray::Axis;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::{load_checkpoint, save_checkpoint, CheckpointState};
use super::curriculum::modality_curriculum;
use super::data::{index_and_split, load_volumes, prepare_volumes, roi_crop, volume_units, PreparedVolume};
use super::freeze::freeze_layers;
use super::{io_err, TrainError};
use crate::config::{device, ExperimentConfig};
use crate::eval::Confusion;
use crate::losses::{compute_loss, mixup_batch};
use crate::models::{build_model, copy_params, params_from_bytes, params_to_bytes, Architecture, MetadataVocabulary, Model};
use crate::nn::{Adam, Parameterized, Tensor};
use crate::report::{qc_montage, render_training_curves, QcPanel};
use crate::transforms::{apply_pipeline, derive_seed, Sample};
use crate::volume::{reconstruct_volume, SampleUnit};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    /// 1-based epoch index.
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_dice: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainingHistory {
    pub rows: Vec<HistoryRow>,
}

impl TrainingHistory {
    pub fn train_losses(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.train_loss).collect()
    }
    pub fn val_losses(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.val_loss).collect()
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Stop after this many completed epochs, as if the process were killed
    /// right after writing that checkpoint.
    pub interrupt_after: Option<usize>,
    /// Checkpoint to continue from; overrides `training.resume`.
    pub resume: Option<PathBuf>,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub history: TrainingHistory,
    pub best_epoch: usize,
    pub best_dice: f64,
    pub completed: bool,
}

pub fn write_history(rows: &[HistoryRow], path: &Path) -> Result<(), TrainError> {
    let mut text = String::from("epoch,train_loss,val_loss,val_dice,seconds\n");
    for r in rows {
        text.push_str(&format!("{},{},{},{},{}\n", r.epoch, r.train_loss, r.val_loss, r.val_dice, r.seconds));
    }
    fs::write(path, text).map_err(io_err(path))
}

/// Loads, preprocesses and trains on the configured dataset.
pub fn run_training(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<TrainOutcome, TrainError> {
    let ds = index_and_split(cfg)?;
    if ds.split.train.is_empty() {
        return Err(TrainError::EmptyBucket("train"));
    }
    if ds.split.validation.is_empty() {
        return Err(TrainError::EmptyBucket("validation"));
    }
    let contrasts = &cfg.loader.contrasts.train_validation;
    let keep_labeled = |v: Vec<super::LoadedVolume>| -> Vec<super::LoadedVolume> {
        v.into_iter()
            .filter(|x| {
                if x.label.is_none() {
                    warn!("{}: no labels, not used for training", x.id);
                }
                x.label.is_some()
            })
            .collect()
    };
    let train = keep_labeled(load_volumes(cfg, &ds.records, &ds.split.train, contrasts)?);
    let val = keep_labeled(load_volumes(cfg, &ds.records, &ds.split.validation, contrasts)?);
    let pre = cfg.preprocessing();
    let mut train = prepare_volumes(&train, &pre)?;
    let mut val = prepare_volumes(&val, &pre)?;
    if let Some(c) = &cfg.cascade {
        train = train.iter().map(|v| roi_crop(v, c.margin)).collect::<Result<_, _>>()?;
        val = val.iter().map(|v| roi_crop(v, c.margin)).collect::<Result<_, _>>()?;
    }
    fs::create_dir_all(&cfg.output.path).map_err(io_err(&cfg.output.path))?;
    let info_path = cfg.output.path.join("split.json");
    fs::write(&info_path, serde_json::to_string_pretty(&ds.split).unwrap()).map_err(io_err(&info_path))?;
    train_from_volumes(cfg, &train, &val, opts)
}

fn unit_weights(cfg: &ExperimentConfig, units: &[SampleUnit]) -> Result<Option<Vec<f64>>, TrainError> {
    let Some(key) = &cfg.loader.balance_key else {
        return Ok(None);
    };
    let mut missing: Vec<String> = units.iter().filter(|u| !u.metadata.contains_key(key)).map(|u| u.volume_id.clone()).collect();
    missing.dedup();
    if !missing.is_empty() {
        return Err(crate::bids::BidsError::MissingKey { key: key.clone(), offenders: missing }.into());
    }
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for u in units {
        *counts.entry(u.metadata[key].to_string()).or_default() += 1;
    }
    Ok(Some(units.iter().map(|u| 1.0 / counts[&u.metadata[key].to_string()] as f64).collect()))
}

/// `(N, C, voxels)` values of the unpadded region.
fn crop_flat(t: &Tensor, spatial: [usize; 3]) -> Vec<f64> {
    let [n, c, pd, ph, pw] = t.shape;
    let mut out = Vec::with_capacity(n * c * spatial.iter().product::<usize>());
    for i in 0..n * c {
        let base = i * pd * ph * pw;
        for z in 0..spatial[0] {
            for y in 0..spatial[1] {
                let o = base + (z * ph + y) * pw;
                out.extend(t.data[o..o + spatial[2]].iter().map(|v| *v as f64));
            }
        }
    }
    out
}

fn scatter_grad(grad: &[f64], shape: [usize; 5], spatial: [usize; 3], scale: f64) -> Tensor {
    let [n, c, pd, ph, pw] = shape;
    let mut t = Tensor::zeros(shape);
    let mut k = 0;
    for i in 0..n * c {
        let base = i * pd * ph * pw;
        for z in 0..spatial[0] {
            for y in 0..spatial[1] {
                let o = base + (z * ph + y) * pw;
                for x in 0..spatial[2] {
                    t.data[o + x] = (grad[k] * scale) as f32;
                    k += 1;
                }
            }
        }
    }
    t
}

fn group_by_shape(units: &[SampleUnit]) -> Vec<Vec<usize>> {
    let mut groups: BTreeMap<Vec<usize>, Vec<usize>> = BTreeMap::new();
    for (i, u) in units.iter().enumerate() {
        groups.entry(u.data.shape().to_vec()).or_default().push(i);
    }
    groups.into_values().collect()
}

struct Validation {
    loss: f64,
    dice: f64,
}

fn validate(model: &mut Model, cfg: &ExperimentConfig, val: &[(Vec<SampleUnit>, &PreparedVolume)]) -> Result<Validation, TrainError> {
    let spec = &cfg.training.loss;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (mut loss_sum, mut loss_n) = (0.0, 0usize);
    let (mut dice_sum, mut dice_n) = (0.0, 0usize);
    for (units, vol) in val {
        let mut preds = Vec::with_capacity(units.len());
        for group in group_by_shape(units) {
            for chunk in group.chunks(cfg.training.batch_size) {
                let refs: Vec<&SampleUnit> = chunk.iter().map(|i| &units[*i]).collect();
                let (x, spatial) = model.batch_tensor(&refs, false)?;
                let (yt, _) = model.batch_tensor(&refs, true)?;
                let ctx = model.context_for(&refs, false);
                let y = model.net.forward(&x, &ctx, &mut rng)?;
                let p = crop_flat(&y, spatial);
                let l = compute_loss(spec, &p, &crop_flat(&yt, spatial), spatial.iter().product())?;
                loss_sum += l.value * refs.len() as f64;
                loss_n += refs.len();
                let (_, a, b, d) = refs[0].data.dim();
                for (i, arr) in chunk.iter().zip(model.split_output(&y, spatial, (a, b, d))) {
                    preds.push((*i, arr));
                }
            }
        }
        preds.sort_by_key(|(i, _)| *i);
        let preds: Vec<_> = preds.into_iter().map(|(_, a)| a).collect();
        let soft = reconstruct_volume(units, &preds)?;
        let label = vol.label.as_ref().expect("validation volumes carry labels");
        for c in 0..soft.channels() {
            let p = soft.data.index_axis(Axis(0), c).map(|v| *v >= 0.5);
            let g = label.data.index_axis(Axis(0), c).map(|v| *v >= 0.5);
            dice_sum += Confusion::of(p.view(), g.view()).dice();
            dice_n += 1;
        }
    }
    Ok(Validation {
        loss: loss_sum / loss_n.max(1) as f64,
        dice: dice_sum / dice_n.max(1) as f64,
    })
}

fn build(cfg: &ExperimentConfig, train_units: &[SampleUnit]) -> Result<Model, TrainError> {
    let mut spec = cfg.model.clone();
    let vocabulary = match (&spec.architecture, &spec.film_metadata_key) {
        (Architecture::FilmUnet, Some(key)) => {
            let v = MetadataVocabulary::fit(key, train_units.iter().map(|u| u.metadata.get(key)));
            spec.film_input_dim = v.dim();
            Some(v)
        }
        _ => None,
    };
    let mut model = build_model(&spec, derive_seed(cfg.training.seed, "init", 0))?;
    model.vocabulary = vocabulary;
    let mut stored = cfg.clone();
    stored.training.resume = None;
    model.config = Some(stored.to_value());
    if let Some(dir) = &cfg.training.pretrained {
        let mut src = Model::load(dir)?;
        let n = copy_params(&mut src.net, &mut model.net);
        info!("initialized {n} parameter tensors from {}", dir.display());
    }
    if let Some(p) = &cfg.training.freeze_pattern {
        let n = freeze_layers(&mut model, p)?;
        info!("froze {n} parameter tensors matching `{p}`");
    }
    Ok(model)
}

fn write_qc(cfg: &ExperimentConfig, train: &[PreparedVolume], path: &Path) -> Result<(), TrainError> {
    let aug = cfg.augmentation();
    let names: Vec<&str> = aug.iter().map(|t| t.kind.name()).collect();
    let title = if names.is_empty() { "identity".to_string() } else { names.join(",") };
    let mut panels = Vec::new();
    for v in train.iter().take(4) {
        let [_, _, z] = v.image.shape3();
        let sample = Sample::from_volume(&v.image, v.label.as_ref());
        let (after, _) = apply_pipeline(&sample, &aug, derive_seed(cfg.training.seed, &v.id, 0))?;
        panels.push(QcPanel {
            before: v.image.data.index_axis(Axis(0), 0).index_axis(Axis(2), z / 2).to_owned(),
            after: after.image.index_axis(Axis(0), 0).index_axis(Axis(2), z / 2).to_owned(),
            title: title.clone(),
        });
    }
    qc_montage(&panels, path).map_err(|e| TrainError::Data(format!("qc montage: {e}")))
}

/// Trains on already prepared volumes; every output goes under
/// `output.path`.
pub fn train_from_volumes(cfg: &ExperimentConfig, train: &[PreparedVolume], val: &[PreparedVolume], opts: &RunOptions) -> Result<TrainOutcome, TrainError> {
    if train.is_empty() {
        return Err(TrainError::EmptyBucket("train"));
    }
    if val.is_empty() {
        return Err(TrainError::EmptyBucket("validation"));
    }
    let out = &cfg.output.path;
    fs::create_dir_all(out).map_err(io_err(out))?;
    let units_spec = cfg.loader.unit_spec();
    let mut train_units = Vec::new();
    for v in train {
        train_units.extend(volume_units(v, &units_spec)?);
    }
    let val_units: Vec<(Vec<SampleUnit>, &PreparedVolume)> = val.iter().map(|v| Ok((volume_units(v, &units_spec)?, v))).collect::<Result<_, TrainError>>()?;
    let weights = unit_weights(cfg, &train_units)?;

    let t = &cfg.training;
    let fingerprint = cfg.fingerprint();
    let mut model = build(cfg, &train_units)?;
    let mut adam = Adam::new(t.lr as f32);
    let mut history = TrainingHistory::default();
    let (mut best_dice, mut best_epoch) = (f64::NEG_INFINITY, 0usize);
    let resume = opts.resume.as_ref().or(t.resume.as_ref());
    if let Some(path) = resume {
        let state = load_checkpoint(path)?;
        if state.config_fingerprint != fingerprint {
            return Err(TrainError::FingerprintMismatch {
                expected: fingerprint,
                found: state.config_fingerprint,
            });
        }
        params_from_bytes(&mut model.net, &state.model_params).map_err(|msg| TrainError::Checkpoint { path: path.clone(), msg })?;
        adam = state.optimizer;
        history.rows = state.history;
        best_dice = state.best_validation_metric;
        best_epoch = state.best_epoch;
        info!("resumed from {} after epoch {}", path.display(), state.epoch);
    }
    let run_info = serde_json::json!({"device": device(), "fingerprint": fingerprint, "train_units": train_units.len()});
    let info_path = out.join("run_info.json");
    fs::write(&info_path, serde_json::to_string_pretty(&run_info).unwrap()).map_err(io_err(&info_path))?;
    info!("training on {} ({} units, {} validation volumes)", device(), train_units.len(), val.len());
    if cfg.output.save_qc && history.rows.is_empty() {
        write_qc(cfg, train, &out.join("qc_montage.png"))?;
    }

    let aug = cfg.augmentation();
    let hemis = cfg.model.architecture == Architecture::HemisUnet;
    let batch_size = t.batch_size;
    let start = history.rows.len();
    for epoch in start..t.epochs {
        let clock = Instant::now();
        let epoch_seed = derive_seed(t.seed, "epoch", epoch);
        let mut order_rng = ChaCha8Rng::seed_from_u64(epoch_seed);
        let order: Vec<usize> = match &weights {
            Some(w) => {
                let dist = WeightedIndex::new(w).map_err(|e| TrainError::Data(format!("sampling weights: {e}")))?;
                (0..train_units.len()).map(|_| dist.sample(&mut order_rng)).collect()
            }
            None => {
                let mut o: Vec<usize> = (0..train_units.len()).collect();
                o.shuffle(&mut order_rng);
                o
            }
        };
        let (mut loss_sum, mut batches) = (0.0, 0usize);
        for (b, chunk) in order.chunks(batch_size).enumerate() {
            let mut batch: Vec<SampleUnit> = Vec::with_capacity(chunk.len());
            for (j, &i) in chunk.iter().enumerate() {
                let mut u = train_units[i].clone();
                if !aug.is_empty() {
                    let (s, _) = apply_pipeline(&Sample::from_unit(&u), &aug, derive_seed(epoch_seed, &u.volume_id, b * batch_size + j))?;
                    u.data = s.image;
                    u.label = s.label;
                }
                if hemis {
                    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(epoch_seed, "modality", b * batch_size + j));
                    u.availability = modality_curriculum(epoch, t.epochs, &t.curriculum, &u.availability, &mut rng)?.mask;
                }
                batch.push(u);
            }
            model.net.zero_grad();
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(epoch_seed, "batch", b));
            let mut batch_loss = 0.0;
            for group in group_by_shape(&batch) {
                let refs: Vec<&SampleUnit> = group.iter().map(|i| &batch[*i]).collect();
                let (mut x, spatial) = model.batch_tensor(&refs, false)?;
                let (mut yt, _) = model.batch_tensor(&refs, true)?;
                if let (Some(beta), true) = (t.mixup_beta, refs.len() >= 2) {
                    let m = mixup_batch(&x, &yt, beta, &mut rng)?;
                    x = m.x;
                    yt = m.y;
                }
                let ctx = model.context_for(&refs, true);
                let y = model.net.forward_train(&x, &ctx, &mut rng)?;
                let l = compute_loss(&t.loss, &crop_flat(&y, spatial), &crop_flat(&yt, spatial), spatial.iter().product())?;
                let share = refs.len() as f64 / batch.len() as f64;
                batch_loss += l.value * share;
                model.net.backward(scatter_grad(&l.grad, y.shape, spatial, share));
            }
            if !batch_loss.is_finite() {
                return Err(TrainError::NonFinite {
                    epoch: epoch + 1,
                    batch: b,
                    value: batch_loss,
                });
            }
            adam.step(&mut model.net);
            loss_sum += batch_loss;
            batches += 1;
        }
        let v = validate(&mut model, cfg, &val_units)?;
        if !v.loss.is_finite() {
            return Err(TrainError::NonFinite {
                epoch: epoch + 1,
                batch: usize::MAX,
                value: v.loss,
            });
        }
        let row = HistoryRow {
            epoch: epoch + 1,
            train_loss: loss_sum / batches.max(1) as f64,
            val_loss: v.loss,
            val_dice: v.dice,
            seconds: clock.elapsed().as_secs_f64(),
        };
        info!(
            "epoch {}: train loss {:.5}, val loss {:.5}, val dice {:.4} ({:.1}s)",
            row.epoch, row.train_loss, row.val_loss, row.val_dice, row.seconds
        );
        history.rows.push(row);
        if v.dice > best_dice {
            best_dice = v.dice;
            best_epoch = epoch + 1;
            model.save(&out.join("best_model"))?;
        }
        let state = CheckpointState {
            epoch: epoch + 1,
            model_params: params_to_bytes(&mut model.net),
            optimizer: adam.clone(),
            seed: t.seed,
            best_validation_metric: best_dice,
            best_epoch,
            config_fingerprint: fingerprint.clone(),
            history: history.rows.clone(),
        };
        save_checkpoint(&state, &out.join(format!("checkpoint_epoch_{}", epoch + 1)))?;
        write_history(&history.rows, &out.join("history.csv"))?;
        if opts.interrupt_after == Some(epoch + 1) {
            return Ok(TrainOutcome {
                model,
                history,
                best_epoch,
                best_dice,
                completed: false,
            });
        }
    }
    model.save(&out.join("final_model"))?;
    write_history(&history.rows, &out.join("history.csv"))?;
    if cfg.output.save_curves {
        render_training_curves(&history.rows, out).map_err(|e| TrainError::Data(format!("training curves: {e}")))?;
    }
    Ok(TrainOutcome {
        model,
        history,
        best_epoch,
        best_dice,
        completed: true,
    })
}
