use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use super::*;
use crate::config::{parse_config, CurriculumConfig, ExperimentConfig};
use crate::models::build_model;
use crate::nn::Parameterized;
use crate::synth::{generate_dataset, synth_subject, SynthSpec, SynthTask};
use crate::transforms::derive_seed;

fn small_spec() -> SynthSpec {
    SynthSpec {
        subjects: 6,
        shape: [16, 16, 4],
        spacing: [1.0, 1.0, 1.0],
        task: SynthTask::SmallObject,
        ..SynthSpec::default()
    }
}

fn prepared(spec: &SynthSpec, index: usize) -> PreparedVolume {
    let s = synth_subject(spec, index);
    let mut meta = crate::meta::Metadata::new();
    meta.insert("site".into(), crate::meta::MetaValue::Text(if index % 2 == 0 { "A" } else { "B" }.into()));
    let image = if s.images.len() == 1 {
        s.images[0].clone()
    } else {
        let views: Vec<_> = s.images.iter().map(|v| v.data.view()).collect();
        s.images[0].with_data(ndarray::concatenate(ndarray::Axis(0), &views).unwrap()).unwrap()
    };
    PreparedVolume {
        id: crate::synth::subject_id(index),
        subject_id: crate::synth::subject_id(index),
        availability: vec![true; image.channels()],
        native: image.clone(),
        image,
        label: Some(s.label),
        metadata: meta,
        records: Vec::new(),
    }
}

fn config(out: &Path, extra: Value) -> ExperimentConfig {
    let mut v = json!({
        "loader": {"bids_path": "unused", "contrasts": {"train_validation": ["T1w"]}},
        "model": {"depth": 2, "base_filters": 4, "dropout_rate": 0.0},
        "training": {"epochs": 2, "batch_size": 4, "lr": 0.01, "seed": 3},
        "output": {"path": out.to_str().unwrap(), "save_curves": false}
    });
    merge(&mut v, extra);
    parse_config(&v.to_string(), "test", None).unwrap()
}

fn merge(a: &mut Value, b: Value) {
    match (a, b) {
        (Value::Object(a), Value::Object(b)) => {
            for (k, v) in b {
                merge(a.entry(k).or_insert(Value::Null), v);
            }
        }
        (a, b) => *a = b,
    }
}

fn params(model: &mut crate::models::Model) -> BTreeMap<String, Vec<f32>> {
    let mut m = BTreeMap::new();
    model.net.visit_params("", &mut |n, p| {
        m.insert(n.to_string(), p.value.clone());
    });
    m
}

fn without_time(h: &TrainingHistory) -> Vec<(usize, f64, f64, f64)> {
    h.rows.iter().map(|r| (r.epoch, r.train_loss, r.val_loss, r.val_dice)).collect()
}

#[test]
fn checkpoint_round_trip_and_corruption() {
    let dir = tempfile::tempdir().unwrap();
    let mut model = build_model(&crate::models::ModelSpec::default().with_defaults(), 1).unwrap();
    let mut adam = crate::nn::Adam::new(0.01);
    model.net.visit_params("", &mut |_, p| p.grad.iter_mut().enumerate().for_each(|(i, g)| *g = (i as f32 * 0.37).sin()));
    adam.step(&mut model.net);
    let state = CheckpointState {
        epoch: 3,
        model_params: crate::models::params_to_bytes(&mut model.net),
        optimizer: adam,
        seed: 42,
        best_validation_metric: 0.123456789012345,
        best_epoch: 2,
        config_fingerprint: "abc".into(),
        history: vec![HistoryRow {
            epoch: 1,
            train_loss: 0.1 + 0.2,
            val_loss: 1.0 / 3.0,
            val_dice: 0.7,
            seconds: 1.5,
        }],
    };
    let p = dir.path().join("checkpoint_epoch_3");
    save_checkpoint(&state, &p).unwrap();
    let back = load_checkpoint(&p).unwrap();
    assert_eq!(back, state);
    assert_eq!(back.history[0].train_loss.to_bits(), state.history[0].train_loss.to_bits());

    let mut bytes = std::fs::read(&p).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x40;
    std::fs::write(&p, &bytes).unwrap();
    let err = load_checkpoint(&p).unwrap_err().to_string();
    assert!(err.contains("checksum"), "{err}");
}

#[test]
fn smoke_one_epoch_two_samples() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), json!({"training": {"epochs": 1}}));
    let spec = small_spec();
    let out = train_from_volumes(&cfg, &[prepared(&spec, 0)], &[prepared(&spec, 1)], &RunOptions::default()).unwrap();
    assert_eq!(out.history.rows.len(), 1);
    for name in ["checkpoint_epoch_1", "history.csv", "best_model/params.bin", "final_model/params.bin"] {
        assert!(dir.path().join(name).exists(), "{name}");
    }
    assert!(matches!(train_from_volumes(&cfg, &[], &[prepared(&spec, 1)], &RunOptions::default()), Err(TrainError::EmptyBucket("train"))));
}

#[test]
fn overfits_four_samples() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), json!({"training": {"epochs": 10, "lr": 0.01}}));
    let spec = small_spec();
    let train: Vec<_> = (0..4).map(|i| prepared(&spec, i)).collect();
    let out = train_from_volumes(&cfg, &train, &train[..1], &RunOptions::default()).unwrap();
    let losses = out.history.train_losses();
    assert!(losses[9] < losses[0] * 0.9, "{losses:?}");
    assert!(losses.windows(2).filter(|w| w[1] < w[0]).count() >= 8, "{losses:?}");
    let first_half: f64 = losses[..5].iter().sum();
    let second_half: f64 = losses[5..].iter().sum();
    assert!(second_half < first_half, "{losses:?}");
}

#[test]
fn deterministic_and_resumable() {
    let spec = small_spec();
    let train: Vec<_> = (0..3).map(|i| prepared(&spec, i)).collect();
    let val = vec![prepared(&spec, 4)];
    let extra = json!({"training": {"epochs": 5, "batch_size": 4}, "model": {"dropout_rate": 0.3},
        "transforms": [{"name": "affine_augment", "params": {"rotation_deg": [-10, 10]}}]});
    let full_dir = tempfile::tempdir().unwrap();
    let full = train_from_volumes(&config(full_dir.path(), extra.clone()), &train, &val, &RunOptions::default()).unwrap();
    let again_dir = tempfile::tempdir().unwrap();
    let again = train_from_volumes(&config(again_dir.path(), extra.clone()), &train, &val, &RunOptions::default()).unwrap();
    assert_eq!(without_time(&full.history), without_time(&again.history));

    let cut_dir = tempfile::tempdir().unwrap();
    let cfg = config(cut_dir.path(), extra.clone());
    let part = train_from_volumes(
        &cfg,
        &train,
        &val,
        &RunOptions {
            interrupt_after: Some(3),
            ..Default::default()
        },
    )
    .unwrap();
    assert!(!part.completed);
    assert!(!cut_dir.path().join("checkpoint_epoch_4").exists());
    let resumed = train_from_volumes(
        &cfg,
        &train,
        &val,
        &RunOptions {
            resume: Some(cut_dir.path().join("checkpoint_epoch_3")),
            ..Default::default()
        },
    )
    .unwrap();
    assert_eq!(resumed.history.rows.len(), 5);
    for (a, b) in full.history.rows[3..].iter().zip(&resumed.history.rows[3..]) {
        assert!((a.train_loss - b.train_loss).abs() <= 1e-6);
        assert!((a.val_loss - b.val_loss).abs() <= 1e-6);
    }

    let mut edited = extra;
    edited["training"]["lr"] = json!(0.02);
    let err = train_from_volumes(
        &config(cut_dir.path(), edited),
        &train,
        &val,
        &RunOptions {
            resume: Some(cut_dir.path().join("checkpoint_epoch_3")),
            ..Default::default()
        },
    )
    .unwrap_err();
    assert!(matches!(err, TrainError::FingerprintMismatch { .. }), "{err}");
}

fn trained_params(pattern: Option<&str>) -> (BTreeMap<String, Vec<f32>>, BTreeMap<String, Vec<f32>>) {
    let dir = tempfile::tempdir().unwrap();
    let mut extra = json!({"training": {"epochs": 1, "batch_size": 8}});
    if let Some(p) = pattern {
        extra["training"]["freeze_pattern"] = json!(p);
    }
    let cfg = config(dir.path(), extra);
    let spec = small_spec();
    let mut init = build_model(&cfg.model, derive_seed(cfg.training.seed, "init", 0)).unwrap();
    let mut out = train_from_volumes(&cfg, &[prepared(&spec, 0), prepared(&spec, 2)], &[prepared(&spec, 1)], &RunOptions::default()).unwrap();
    (params(&mut init), params(&mut out.model))
}

#[test]
fn freezing() {
    let (before, after) = trained_params(Some(".*"));
    assert_eq!(before, after);

    let (before, after) = trained_params(None);
    for (k, v) in &before {
        assert_ne!(v, &after[k], "{k} did not change");
    }

    let (before, after) = trained_params(Some("^encoder"));
    let mut enc = 0;
    for (k, v) in &before {
        if k.starts_with("encoder") {
            enc += 1;
            assert_eq!(v, &after[k], "{k} changed while frozen");
        } else {
            assert_ne!(v, &after[k], "{k} did not change");
        }
    }
    assert!(enc > 0);

    let mut model = build_model(&crate::models::ModelSpec::default().with_defaults(), 0).unwrap();
    match freeze_layers(&mut model, "^nothing_here") {
        Err(TrainError::FreezePattern { groups, .. }) => {
            assert!(groups.iter().any(|g| g.starts_with("encoder0")), "{groups:?}");
            assert!(groups.contains(&"head".to_string()), "{groups:?}");
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn curriculum_schedule() {
    let sched = CurriculumConfig {
        warmup_fraction: 0.5,
        p_max: 0.3,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let present = vec![true; 4];
    for _ in 0..100 {
        assert_eq!(modality_curriculum(0, 10, &sched, &present, &mut rng).unwrap().mask, present);
    }
    let none = CurriculumConfig { p_max: 0.0, ..sched.clone() };
    for e in 0..10 {
        assert_eq!(modality_curriculum(e, 10, &none, &present, &mut rng).unwrap().mask, present);
    }
    assert_eq!(drop_probability(4, 10, &sched).unwrap(), 0.0);
    assert!((drop_probability(9, 10, &sched).unwrap() - 0.3).abs() < 1e-12);
    assert!(drop_probability(7, 10, &sched).unwrap() < 0.3);

    // Monte-Carlo drop rate over the non-anchor modalities at the last epoch.
    let (mut dropped, mut eligible) = (0usize, 0usize);
    for _ in 0..10_000 {
        let a = modality_curriculum(9, 10, &sched, &present, &mut rng).unwrap();
        assert!(a.mask[a.anchor]);
        for (m, keep) in a.mask.iter().enumerate() {
            if m != a.anchor {
                eligible += 1;
                dropped += usize::from(!keep);
            }
        }
    }
    let rate = dropped as f64 / eligible as f64;
    assert!((rate - 0.3).abs() <= 0.02, "rate {rate}");

    let harsh = CurriculumConfig { p_max: 0.99, ..sched.clone() };
    let partial = vec![false, true, true];
    for _ in 0..1000 {
        let a = modality_curriculum(9, 10, &harsh, &partial, &mut rng).unwrap();
        assert!(a.mask.iter().any(|m| *m));
        assert!(!a.mask[0]);
    }
    let bad = CurriculumConfig { p_max: 1.0, ..sched };
    assert!(matches!(modality_curriculum(9, 10, &bad, &present, &mut rng), Err(TrainError::Curriculum(_))));
}

#[test]
fn hemis_and_mixup_train() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(
        dir.path(),
        json!({"loader": {"multichannel": true, "contrasts": {"train_validation": ["T1w", "T2w"]}},
               "model": {"architecture": "hemis_unet", "in_channels": 2},
               "training": {"epochs": 2, "mixup_beta": 0.4, "curriculum": {"warmup_fraction": 0.0, "p_max": 0.5}}}),
    );
    let spec = SynthSpec {
        contrasts: vec!["T1w".into(), "T2w".into()],
        ..small_spec()
    };
    let out = train_from_volumes(&cfg, &[prepared(&spec, 0), prepared(&spec, 1)], &[prepared(&spec, 2)], &RunOptions::default()).unwrap();
    assert!(out.history.rows.iter().all(|r| r.train_loss.is_finite()));
}

#[test]
fn balanced_sampling_needs_key() {
    let dir = tempfile::tempdir().unwrap();
    let spec = small_spec();
    let cfg = config(dir.path(), json!({"loader": {"balance_key": "site"}, "training": {"epochs": 1}}));
    train_from_volumes(&cfg, &[prepared(&spec, 0), prepared(&spec, 1)], &[prepared(&spec, 2)], &RunOptions::default()).unwrap();
    let cfg = config(dir.path(), json!({"loader": {"balance_key": "scanner"}, "training": {"epochs": 1}}));
    let err = train_from_volumes(&cfg, &[prepared(&spec, 0)], &[prepared(&spec, 2)], &RunOptions::default()).unwrap_err();
    assert!(err.to_string().contains("scanner"), "{err}");
}

#[test]
fn loading_from_disk() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SynthSpec {
        subjects: 5,
        contrasts: vec!["T1w".into(), "T2w".into()],
        ..small_spec()
    };
    generate_dataset(&dir.path().join("data"), &spec).unwrap();
    std::fs::remove_file(dir.path().join("data/sub-02/anat/sub-02_T2w.nii.gz")).unwrap();
    let base = json!({"loader": {"bids_path": dir.path().join("data").to_str().unwrap(), "multichannel": true,
                       "contrasts": {"train_validation": ["T1w", "T2w"]}},
                      "model": {"architecture": "hemis_unet", "in_channels": 2}, "output": {"path": "o"}});
    let cfg = parse_config(&base.to_string(), "t", None).unwrap();
    let ds = index_and_split(&cfg).unwrap();
    let subjects: Vec<String> = (1..=5).map(|i| format!("sub-{i:02}")).collect();
    let vols = load_volumes(&cfg, &ds.records, &subjects, &cfg.loader.contrasts.train_validation).unwrap();
    assert_eq!(vols.len(), 5);
    let v2 = vols.iter().find(|v| v.id == "sub-02").unwrap();
    assert_eq!(v2.availability, vec![true, false]);
    assert_eq!(v2.image.channels(), 2);
    assert!(v2.image.data.index_axis(ndarray::Axis(0), 1).iter().all(|x| *x == 0.0));
    assert_eq!(v2.metadata.get("site"), Some(&crate::meta::MetaValue::Text("B".into())));

    let mut plain = base.clone();
    plain["model"] = json!({"in_channels": 2});
    let cfg = parse_config(&plain.to_string(), "t", None).unwrap();
    let vols = load_volumes(&cfg, &ds.records, &subjects, &cfg.loader.contrasts.train_validation).unwrap();
    assert_eq!(vols.len(), 4, "sessions missing a contrast are skipped without hemis");

    let mut single = base;
    single["loader"]["multichannel"] = json!(false);
    single["model"] = json!({});
    let cfg = parse_config(&single.to_string(), "t", None).unwrap();
    let vols = load_volumes(&cfg, &ds.records, &subjects, &["T2w".to_string()]).unwrap();
    assert_eq!(vols.len(), 4);
    assert_eq!(vols[0].metadata.get("contrast"), Some(&crate::meta::MetaValue::Text("T2w".into())));
    assert_eq!(vols[0].label.as_ref().unwrap().channels(), 1);
}

#[test]
fn grid_planning() {
    let base = config(Path::new("/tmp/grid_base"), json!({}));
    let mut grid = BTreeMap::new();
    assert_eq!(expand_grid(&grid).len(), 1);
    grid.insert("training.lr".to_string(), vec![json!(0.1), json!(0.01)]);
    grid.insert("training.batch_size".to_string(), vec![json!(2), json!(4), json!(8)]);
    let devices = vec!["dev0".to_string(), "dev1".to_string()];
    let runs = plan_grid(&base, &grid, &devices).unwrap();
    assert_eq!(runs.len(), 6);
    assert_eq!(runs.iter().filter(|r| r.device == "dev0").count(), 3);
    assert_eq!(runs[1].config.output.path, Path::new("/tmp/grid_base/run_1"));
    let mut seen: Vec<(usize, String)> = runs
        .iter()
        .map(|r| (r.config.training.batch_size, r.config.training.lr.to_string()))
        .collect();
    seen.sort();
    seen.dedup();
    assert_eq!(seen.len(), 6);

    grid.insert("training.learning_rate".to_string(), vec![json!(1)]);
    assert!(matches!(plan_grid(&base, &grid, &devices), Err(TrainError::Grid(_))));
}

#[test]
fn inference_respects_missing_modalities() {
    let spec = crate::models::ModelSpec {
        architecture: crate::models::Architecture::HemisUnet,
        in_channels: 2,
        n_modalities: 2,
        depth: 2,
        base_filters: 4,
        ..Default::default()
    };
    let mut model = build_model(&spec, 4).unwrap();
    let two = SynthSpec {
        contrasts: vec!["T1w".into(), "T2w".into()],
        ..small_spec()
    };
    let v = prepared(&two, 0).image;
    let mut changed = v.clone();
    changed.data.index_axis_mut(ndarray::Axis(0), 1).fill(3.0);
    let mut settings = crate::eval::InferenceSettings::new(crate::volume::UnitSpec::slices(2));
    settings.availability = Some(vec![true, false]);
    let a = crate::eval::segment_volume(&mut model, &v, &settings).unwrap();
    let b = crate::eval::segment_volume(&mut model, &changed, &settings).unwrap();
    assert_eq!(a.data, b.data);
    settings.availability = None;
    let c = crate::eval::segment_volume(&mut model, &changed, &settings).unwrap();
    assert_ne!(a.data, c.data);
}
