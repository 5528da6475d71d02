//! Cartesian hyperparameter grids run as independent `train` processes,
//! assigned round-robin to devices.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::Mutex;

use log::info;
use serde_json::Value;

use super::{io_err, TrainError};
use crate::config::{with_overrides, ExperimentConfig, DEVICE_ENV};

#[derive(Debug, Clone)]
pub struct GridRun {
    pub index: usize,
    pub overrides: BTreeMap<String, Value>,
    pub device: String,
    pub config: ExperimentConfig,
    pub dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridResult {
    pub index: usize,
    pub device: String,
    pub overrides: BTreeMap<String, Value>,
    pub ok: bool,
    pub best_val_dice: Option<f64>,
    pub final_val_loss: Option<f64>,
    pub final_val_dice: Option<f64>,
    pub error: Option<String>,
}

/// Reads `{ "dotted.key": [v1, v2, ...], ... }`.
pub fn read_grid(path: &Path) -> Result<BTreeMap<String, Vec<Value>>, TrainError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let v: Value = serde_json::from_str(&text).map_err(|e| TrainError::Grid(format!("{}: {e}", path.display())))?;
    let obj = v.as_object().ok_or_else(|| TrainError::Grid(format!("{}: top level must be an object", path.display())))?;
    let mut out = BTreeMap::new();
    for (k, vals) in obj {
        let list = vals
            .as_array()
            .filter(|a| !a.is_empty())
            .ok_or_else(|| TrainError::Grid(format!("`{k}` must map to a non-empty list of values")))?;
        out.insert(k.clone(), list.clone());
    }
    Ok(out)
}

/// Every combination, last key varying fastest. An empty grid yields one
/// empty override set.
pub fn expand_grid(grid: &BTreeMap<String, Vec<Value>>) -> Vec<BTreeMap<String, Value>> {
    let mut combos = vec![BTreeMap::new()];
    for (k, vals) in grid {
        let mut next = Vec::with_capacity(combos.len() * vals.len());
        for c in &combos {
            for v in vals {
                let mut m = c.clone();
                m.insert(k.clone(), v.clone());
                next.push(m);
            }
        }
        combos = next;
    }
    combos
}

/// Validates every run before anything is launched. Each run writes to
/// `<output.path>/run_<i>`.
pub fn plan_grid(base: &ExperimentConfig, grid: &BTreeMap<String, Vec<Value>>, devices: &[String]) -> Result<Vec<GridRun>, TrainError> {
    if devices.is_empty() {
        return Err(TrainError::Grid("no devices given".into()));
    }
    for key in grid.keys() {
        if key == "output.path" {
            return Err(TrainError::Grid("output.path is assigned per run and cannot be a grid key".into()));
        }
    }
    expand_grid(grid)
        .into_iter()
        .enumerate()
        .map(|(index, overrides)| {
            let mut config = with_overrides(base, &overrides).map_err(|e| TrainError::Grid(e.to_string()))?;
            let dir = base.output.path.join(format!("run_{index}"));
            config.output.path = dir.clone();
            Ok(GridRun {
                index,
                overrides,
                device: devices[index % devices.len()].clone(),
                config,
                dir,
            })
        })
        .collect()
}

fn last_history(dir: &Path) -> Option<(f64, f64, f64)> {
    let text = fs::read_to_string(dir.join("history.csv")).ok()?;
    let mut best = f64::NEG_INFINITY;
    let mut last = None;
    for line in text.lines().skip(1) {
        let f: Vec<f64> = line.split(',').filter_map(|x| x.parse().ok()).collect();
        if f.len() >= 4 {
            best = best.max(f[3]);
            last = Some((f[2], f[3]));
        }
    }
    last.map(|(l, d)| (best, l, d))
}

fn execute(run: &GridRun, exe: &Path) -> GridResult {
    let mut result = GridResult {
        index: run.index,
        device: run.device.clone(),
        overrides: run.overrides.clone(),
        ok: false,
        best_val_dice: None,
        final_val_loss: None,
        final_val_dice: None,
        error: None,
    };
    let prepared = fs::create_dir_all(&run.dir).and_then(|_| {
        let cfg = serde_json::to_string_pretty(&run.config.to_value()).expect("config serializes");
        fs::write(run.dir.join("config.json"), cfg)
    });
    if let Err(e) = prepared {
        result.error = Some(format!("cannot prepare {}: {e}", run.dir.display()));
        return result;
    }
    info!("run {} on {}: {:?}", run.index, run.device, run.overrides);
    let output = Command::new(exe)
        .arg("train")
        .arg("-c")
        .arg(run.dir.join("config.json"))
        .env(DEVICE_ENV, &run.device)
        .output();
    match output {
        Err(e) => result.error = Some(format!("cannot launch {}: {e}", exe.display())),
        Ok(o) => {
            let _ = fs::write(run.dir.join("train.log"), &o.stderr);
            if o.status.success() {
                result.ok = true;
                if let Some((best, loss, dice)) = last_history(&run.dir) {
                    result.best_val_dice = Some(best);
                    result.final_val_loss = Some(loss);
                    result.final_val_dice = Some(dice);
                }
            } else {
                let stderr = String::from_utf8_lossy(&o.stderr);
                let last = stderr.lines().rev().find(|l| !l.trim().is_empty()).unwrap_or("no output");
                result.error = Some(format!("exit {}: {}", o.status.code().unwrap_or(-1), last.trim()));
            }
        }
    }
    result
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn write_summary(results: &[GridResult], keys: &[String], path: &Path) -> Result<(), TrainError> {
    let mut text = String::from("run,device,status");
    for k in keys {
        text.push(',');
        text.push_str(&csv_field(k));
    }
    text.push_str(",best_val_dice,final_val_loss,final_val_dice,error\n");
    let num = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in results {
        text.push_str(&format!("{},{},{}", r.index, csv_field(&r.device), if r.ok { "ok" } else { "failed" }));
        for k in keys {
            text.push(',');
            text.push_str(&csv_field(&r.overrides.get(k).map(|v| v.to_string()).unwrap_or_default()));
        }
        text.push_str(&format!(
            ",{},{},{},{}\n",
            num(r.best_val_dice),
            num(r.final_val_loss),
            num(r.final_val_dice),
            csv_field(r.error.as_deref().unwrap_or(""))
        ));
    }
    fs::write(path, text).map_err(io_err(path))
}

/// Runs the grid with one worker thread per device, each launching its
/// runs as separate `exe train` processes, and writes
/// `<output.path>/grid_results.csv`.
pub fn automate_grid(base: &ExperimentConfig, grid: &BTreeMap<String, Vec<Value>>, devices: &[String], exe: &Path) -> Result<Vec<GridResult>, TrainError> {
    let runs = plan_grid(base, grid, devices)?;
    fs::create_dir_all(&base.output.path).map_err(io_err(&base.output.path))?;
    let results = Mutex::new(Vec::with_capacity(runs.len()));
    let mut unique: Vec<&String> = Vec::new();
    for d in devices {
        if !unique.contains(&d) {
            unique.push(d);
        }
    }
    std::thread::scope(|s| {
        for d in unique {
            let mine: Vec<&GridRun> = runs.iter().filter(|r| &r.device == d).collect();
            let results = &results;
            s.spawn(move || {
                for run in mine {
                    let r = execute(run, exe);
                    results.lock().unwrap().push(r);
                }
            });
        }
    });
    let mut results = results.into_inner().unwrap();
    results.sort_by_key(|r| r.index);
    let keys: Vec<String> = grid.keys().cloned().collect();
    write_summary(&results, &keys, &base.output.path.join("grid_results.csv"))?;
    Ok(results)
}
