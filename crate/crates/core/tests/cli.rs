use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

use segkit::synth::{generate_dataset, SynthSpec};
use segkit::volume::read_nifti;

const BIN: &str = env!("CARGO_BIN_EXE_segkit");

fn segkit(args: &[&str], device: Option<&str>) -> Output {
    let mut cmd = Command::new(BIN);
    cmd.args(args).env("RUST_LOG", "warn");
    if let Some(d) = device {
        cmd.env("SEGKIT_DEVICE", d);
    }
    cmd.output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap_or(-1)
}

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Fixture {
    fn new(subjects: usize) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        generate_dataset(
            &root.join("data"),
            &SynthSpec {
                subjects,
                shape: [16, 16, 4],
                ..Default::default()
            },
        )
        .unwrap();
        Fixture { _dir: dir, root }
    }

    fn config(&self, name: &str, out: &str) -> (PathBuf, Value) {
        let v = json!({
            "loader": {"bids_path": "data", "contrasts": {"train_validation": ["T1w"]}},
            "split": {"fractions": [0.5, 0.25, 0.25], "seed": 2},
            "model": {"depth": 2, "base_filters": 4},
            "training": {"epochs": 1, "batch_size": 4, "lr": 0.01},
            "output": {"path": out}
        });
        let p = self.write(name, &v);
        (p, v)
    }

    fn write(&self, name: &str, v: &Value) -> PathBuf {
        let p = self.root.join(name);
        fs::write(&p, serde_json::to_string_pretty(v).unwrap()).unwrap();
        p
    }
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn usage_and_exit_codes() {
    assert_eq!(code(&segkit(&[], None)), 1);
    assert_eq!(code(&segkit(&["frobnicate"], None)), 1);
    for sub in ["train", "test", "segment", "automate"] {
        let o = segkit(&[sub, "--help"], None);
        assert_eq!(code(&o), 0, "{sub}");
        assert!(String::from_utf8_lossy(&o.stdout).contains("Usage"), "{sub}");
    }
    let top = segkit(&["--help"], None);
    assert!(String::from_utf8_lossy(&top.stdout).contains("SEGKIT_DEVICE"));
    assert_eq!(code(&segkit(&["train"], None)), 1, "missing -c");

    let f = Fixture::new(4);
    let mut bad = f.config("c.json", "out").1;
    bad["training"]["learning_rate"] = json!(0.1);
    let o = segkit(&["train", "-c", s(&f.write("bad.json", &bad))], None);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("learning_rate"));
    assert_eq!(code(&segkit(&["train", "-c", s(&f.root.join("missing.json"))], None)), 1);

    let mut absent = f.config("c.json", "out").1;
    absent["loader"]["bids_path"] = json!("no_such_dataset");
    assert_eq!(code(&segkit(&["train", "-c", s(&f.write("absent.json", &absent))], None)), 2);
}

#[test]
fn train_test_segment() {
    let f = Fixture::new(8);
    let (cfg, _) = f.config("config.json", "out");
    let o = segkit(&["train", "-c", s(&cfg)], Some("cpu:7"));
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let out = f.root.join("out");
    for p in ["checkpoint_epoch_1", "best_model/params.bin", "final_model/model_spec.json", "history.csv", "split.json"] {
        assert!(out.join(p).exists(), "{p}");
    }
    let info: Value = serde_json::from_str(&fs::read_to_string(out.join("run_info.json")).unwrap()).unwrap();
    assert_eq!(info["device"], "cpu:7");
    assert_eq!(fs::read_to_string(out.join("history.csv")).unwrap().lines().count(), 2);

    let o = segkit(&["test", "-c", s(&cfg), "-m", s(&out.join("best_model"))], None);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(out.join("results_eval.csv")).unwrap();
    assert!(csv.starts_with("subject_id,"), "{csv}");
    let split: Value = serde_json::from_str(&fs::read_to_string(out.join("split.json")).unwrap()).unwrap();
    for id in split["test"].as_array().unwrap() {
        let id = id.as_str().unwrap();
        assert!(out.join(format!("predictions/{id}_pred.nii.gz")).exists(), "{id}");
        assert!(csv.contains(id));
    }

    let input = f.root.join("data/sub-01/anat/sub-01_T1w.nii.gz");
    let seg = f.root.join("seg/sub-01_pred.nii.gz");
    let o = segkit(&["segment", "-i", s(&input), "-m", s(&out.join("final_model")), "-o", s(&seg)], None);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let (a, b) = (read_nifti(&input).unwrap(), read_nifti(&seg).unwrap());
    assert_eq!(a.shape3(), b.shape3());
    assert_eq!(a.spacing, b.spacing);
    assert_eq!(a.affine, b.affine);
    assert!(b.data.iter().all(|v| *v == 0.0 || *v == 1.0));

    // float32 on disk
    let mut header = Vec::new();
    flate2::read::GzDecoder::new(fs::File::open(&seg).unwrap()).read_to_end(&mut header).unwrap();
    assert_eq!(i16::from_le_bytes([header[70], header[71]]), 16);

    let o = segkit(&["segment", "-i", s(&f.root.join("nope.nii.gz")), "-m", s(&out.join("final_model")), "-o", s(&seg)], None);
    assert_eq!(code(&o), 2);
}

fn grid_rows(path: &Path) -> Vec<csv::StringRecord> {
    let mut r = csv::Reader::from_path(path).unwrap();
    r.records().map(|x| x.unwrap()).collect()
}

#[test]
fn automate_grid() {
    let f = Fixture::new(6);
    let (cfg, _) = f.config("base.json", "grid");
    let grid = f.write("grid.json", &json!({"training.lr": [0.01, 0.001]}));
    let o = segkit(&["automate", "-c", s(&cfg), "-g", s(&grid), "-d", "dev0,dev1"], None);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let rows = grid_rows(&f.root.join("grid/grid_results.csv"));
    assert_eq!(rows.len(), 2);
    for (i, r) in rows.iter().enumerate() {
        assert_eq!(&r[0], i.to_string());
        assert_eq!(&r[1], format!("dev{i}"));
        assert_eq!(&r[2], "ok");
        let info: Value = serde_json::from_str(&fs::read_to_string(f.root.join(format!("grid/run_{i}/run_info.json"))).unwrap()).unwrap();
        assert_eq!(info["device"], format!("dev{i}"));
        assert!(f.root.join(format!("grid/run_{i}/history.csv")).exists());
    }

    // one run points at a missing dataset; the other still completes
    let faulty = f.write("faulty.json", &json!({"loader.bids_path": [f.root.join("data"), f.root.join("gone")]}));
    let (cfg, _) = f.config("base2.json", "faulty");
    let o = segkit(&["automate", "-c", s(&cfg), "-g", s(&faulty), "-d", "dev0"], None);
    assert_eq!(code(&o), 2);
    let rows = grid_rows(&f.root.join("faulty/grid_results.csv"));
    assert_eq!(rows.len(), 2);
    assert_eq!(&rows[0][2], "ok");
    assert_eq!(&rows[1][2], "failed");
    let last = rows[1].len() - 1;
    assert!(!rows[1][last].is_empty());

    // an unknown key fails validation before anything runs
    let bad = f.write("bad.json", &json!({"training.lr": [0.1], "training.nope": [1]}));
    let (cfg, _) = f.config("base3.json", "bad");
    let o = segkit(&["automate", "-c", s(&cfg), "-g", s(&bad), "-d", "dev0"], None);
    assert_eq!(code(&o), 1);
    assert!(!f.root.join("bad/run_0").exists());
}
