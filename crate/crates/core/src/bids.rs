//! BIDS dataset indexing, metadata merging, subject-level splits and
//! sampling weights.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use log::warn;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use walkdir::WalkDir;

use crate::meta::{MetaValue, Metadata};

#[derive(Debug, Error)]
pub enum BidsError {
    #[error("dataset root {0} does not exist")]
    RootMissing(PathBuf),
    #[error("no BIDS images found under {root}; first skipped names: [{}]", .skipped.join(", "))]
    NoImages { root: PathBuf, skipped: Vec<String> },
    #[error("malformed sidecar {path} at byte {offset}: {msg}")]
    Sidecar { path: PathBuf, offset: usize, msg: String },
    #[error("participants file {path}: {msg}")]
    Participants { path: PathBuf, msg: String },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("split fractions {0:?} must be non-negative and sum to 1")]
    BadFractions([f64; 3]),
    #[error("{subjects} subjects cannot fill {buckets} non-empty split buckets")]
    TooFewSubjects { subjects: usize, buckets: usize },
    #[error("metadata key `{key}` missing on: {}", .offenders.join(", "))]
    MissingKey { key: String, offenders: Vec<String> },
}

/// Parsed BIDS filename: `key-value` entities, a suffix and an extension.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BidsName {
    pub entities: Vec<(String, String)>,
    pub suffix: String,
    pub extension: String,
}

impl BidsName {
    pub fn parse(name: &str) -> Option<BidsName> {
        let (stem, extension) = if let Some(s) = name.strip_suffix(".nii.gz") {
            (s, ".nii.gz")
        } else if let Some(s) = name.strip_suffix(".nii") {
            (s, ".nii")
        } else if let Some(s) = name.strip_suffix(".json") {
            (s, ".json")
        } else {
            return None;
        };
        let parts: Vec<&str> = stem.split('_').collect();
        let (suffix, ents) = parts.split_last()?;
        if suffix.is_empty() || suffix.contains('-') || !suffix.chars().all(|c| c.is_ascii_alphanumeric()) {
            return None;
        }
        let mut entities = Vec::with_capacity(ents.len());
        for e in ents {
            let (k, v) = e.split_once('-')?;
            if k.is_empty() || v.is_empty() || !k.chars().all(|c| c.is_ascii_alphanumeric()) || !v.chars().all(|c| c.is_ascii_alphanumeric()) {
                return None;
            }
            entities.push((k.to_string(), v.to_string()));
        }
        if entities.first().map(|(k, _)| k.as_str()) != Some("sub") {
            return None;
        }
        if let Some(pos) = entities.iter().position(|(k, _)| k == "ses") {
            if pos != 1 {
                return None;
            }
        }
        Some(BidsName {
            entities,
            suffix: suffix.to_string(),
            extension: extension.to_string(),
        })
    }

    pub fn entity(&self, key: &str) -> Option<&str> {
        self.entities.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn stem(&self) -> String {
        let mut s: Vec<String> = self.entities.iter().map(|(k, v)| format!("{k}-{v}")).collect();
        s.push(self.suffix.clone());
        s.join("_")
    }

    pub fn to_filename(&self) -> String {
        format!("{}{}", self.stem(), self.extension)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectRecord {
    /// Full subject token, e.g. `sub-01`.
    pub subject_id: String,
    pub session_id: Option<String>,
    pub contrast: String,
    pub image_path: PathBuf,
    pub label_paths: Vec<PathBuf>,
    pub metadata: Metadata,
}

impl SubjectRecord {
    /// Identifier unique per image: the filename stem.
    pub fn volume_id(&self) -> String {
        let name = self.image_path.file_name().map(|n| n.to_string_lossy().to_string()).unwrap_or_default();
        BidsName::parse(&name).map(|b| b.stem()).unwrap_or(name)
    }
}

#[derive(Debug, Clone, Default)]
pub struct ScanResult {
    pub records: Vec<SubjectRecord>,
    /// NIfTI files that did not follow the naming grammar or layout.
    pub skipped: Vec<String>,
}

fn is_nifti(name: &str) -> bool {
    name.ends_with(".nii") || name.ends_with(".nii.gz")
}

/// Checks that `rel` (relative to root) is `sub-X/[ses-Y/]<datatype>/file`
/// with entities agreeing with the directories.
fn layout_ok(rel: &Path, name: &BidsName) -> bool {
    let comps: Vec<String> = rel.components().map(|c| c.as_os_str().to_string_lossy().to_string()).collect();
    let sub = format!("sub-{}", name.entity("sub").unwrap_or_default());
    match (comps.len(), name.entity("ses")) {
        (3, None) => comps[0] == sub && !comps[1].starts_with("ses-"),
        (4, Some(ses)) => comps[0] == sub && comps[1] == format!("ses-{ses}") && !comps[2].starts_with("ses-"),
        _ => false,
    }
}

fn find_label(root: &Path, rel_dir: &Path, name: &BidsName, suffix: &str) -> Option<PathBuf> {
    let dir = root.join("derivatives").join("labels").join(rel_dir);
    let stem = format!("{}_{}", name.stem(), suffix);
    [".nii.gz", ".nii"].iter().map(|ext| dir.join(format!("{stem}{ext}"))).find(|p| p.is_file())
}

/// Walks the dataset and returns matching records plus skipped names.
/// `contrasts` empty means every suffix.
pub fn scan_dataset(root: &Path, contrasts: &[String], target_suffixes: &[String]) -> Result<ScanResult, BidsError> {
    if !root.is_dir() {
        return Err(BidsError::RootMissing(root.to_path_buf()));
    }
    let mut result = ScanResult::default();
    let walker = WalkDir::new(root).min_depth(1).sort_by_file_name().into_iter().filter_entry(|e| {
        let n = e.file_name().to_string_lossy();
        !(e.depth() == 1 && n == "derivatives") && !n.starts_with('.')
    });
    for entry in walker {
        let entry = entry.map_err(|e| BidsError::Io {
            path: e.path().map(Path::to_path_buf).unwrap_or_else(|| root.to_path_buf()),
            source: e.into_io_error().unwrap_or_else(|| std::io::Error::other("walk error")),
        })?;
        if !entry.file_type().is_file() {
            continue;
        }
        let file = entry.file_name().to_string_lossy().to_string();
        if !is_nifti(&file) {
            continue;
        }
        let rel = entry.path().strip_prefix(root).unwrap_or(entry.path());
        let parsed = BidsName::parse(&file).filter(|n| layout_ok(rel, n));
        let Some(name) = parsed else {
            warn!("skipping non-BIDS file {}", rel.display());
            result.skipped.push(rel.display().to_string());
            continue;
        };
        if !contrasts.is_empty() && !contrasts.contains(&name.suffix) {
            continue;
        }
        let rel_dir = rel.parent().unwrap_or(Path::new(""));
        let labels: Vec<Option<PathBuf>> = target_suffixes.iter().map(|s| find_label(root, rel_dir, &name, s)).collect();
        let label_paths = if labels.iter().all(Option::is_some) {
            labels.into_iter().flatten().collect()
        } else {
            if !target_suffixes.is_empty() {
                warn!("{}: not all labels {:?} found", rel.display(), target_suffixes);
            }
            Vec::new()
        };
        let metadata = parse_sidecar(entry.path())?;
        result.records.push(SubjectRecord {
            subject_id: format!("sub-{}", name.entity("sub").unwrap()),
            session_id: name.entity("ses").map(|s| format!("ses-{s}")),
            contrast: name.suffix.clone(),
            image_path: entry.path().to_path_buf(),
            label_paths,
            metadata,
        });
    }
    Ok(result)
}

/// Like [`scan_dataset`] but zero matching images is an error listing the
/// first skipped names.
pub fn index_dataset(root: &Path, contrasts: &[String], target_suffixes: &[String]) -> Result<Vec<SubjectRecord>, BidsError> {
    let scan = scan_dataset(root, contrasts, target_suffixes)?;
    if scan.records.is_empty() {
        return Err(BidsError::NoImages {
            root: root.to_path_buf(),
            skipped: scan.skipped.into_iter().take(10).collect(),
        });
    }
    Ok(scan.records)
}

fn json_to_meta(v: &serde_json::Value) -> MetaValue {
    match v {
        serde_json::Value::Bool(b) => MetaValue::Bool(*b),
        serde_json::Value::Number(n) => MetaValue::Number(n.as_f64().unwrap_or(f64::NAN)),
        serde_json::Value::String(s) => MetaValue::Text(s.clone()),
        other => MetaValue::Text(other.to_string()),
    }
}

fn byte_offset(text: &str, line: usize, column: usize) -> usize {
    if line == 0 {
        return 0;
    }
    let start: usize = text.split_inclusive('\n').take(line - 1).map(str::len).sum();
    (start + column.saturating_sub(1)).min(text.len())
}

fn dataset_root_of(image: &Path) -> Option<PathBuf> {
    image
        .ancestors()
        .find(|a| a.file_name().map(|n| n.to_string_lossy().starts_with("sub-")).unwrap_or(false) && a.is_dir())
        .and_then(|sub| sub.parent())
        .map(Path::to_path_buf)
}

fn sidecar_path(image: &Path) -> PathBuf {
    let name = image.file_name().map(|n| n.to_string_lossy().to_string()).unwrap_or_default();
    let stem = name.strip_suffix(".nii.gz").or_else(|| name.strip_suffix(".nii")).unwrap_or(&name);
    image.with_file_name(format!("{stem}.json"))
}

fn participants_row(root: &Path, subject: &str) -> Result<Option<Metadata>, BidsError> {
    let path = root.join("participants.tsv");
    if !path.is_file() {
        return Ok(None);
    }
    let perr = |msg: String| BidsError::Participants { path: path.clone(), msg };
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(b'\t')
        .flexible(false)
        .from_path(&path)
        .map_err(|e| perr(e.to_string()))?;
    let headers = reader.headers().map_err(|e| perr(e.to_string()))?.clone();
    let id_col = headers
        .iter()
        .position(|h| h == "participant_id")
        .ok_or_else(|| perr("missing participant_id column".into()))?;
    for row in reader.records() {
        let row = row.map_err(|e| perr(e.to_string()))?;
        if row.get(id_col) == Some(subject) {
            let mut m = Metadata::new();
            for (h, cell) in headers.iter().zip(row.iter()) {
                if h != "participant_id" && cell != "n/a" {
                    m.insert(h.to_string(), MetaValue::from_cell(cell));
                }
            }
            return Ok(Some(m));
        }
    }
    Ok(None)
}

/// Merges the image's JSON sidecar with its `participants.tsv` row. Sidecar
/// keys take precedence.
pub fn parse_sidecar(image_path: &Path) -> Result<Metadata, BidsError> {
    let mut meta = Metadata::new();
    let side = sidecar_path(image_path);
    let mut found = false;
    if side.is_file() {
        found = true;
        let text = fs::read_to_string(&side).map_err(|source| BidsError::Io { path: side.clone(), source })?;
        let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| BidsError::Sidecar {
            path: side.clone(),
            offset: byte_offset(&text, e.line(), e.column()),
            msg: e.to_string(),
        })?;
        let obj = value.as_object().ok_or_else(|| BidsError::Sidecar {
            path: side.clone(),
            offset: 0,
            msg: "top level is not an object".into(),
        })?;
        for (k, v) in obj {
            meta.insert(k.clone(), json_to_meta(v));
        }
    }
    let name = image_path.file_name().map(|n| n.to_string_lossy().to_string()).unwrap_or_default();
    let subject = BidsName::parse(&name).and_then(|b| b.entity("sub").map(|s| format!("sub-{s}")));
    if let (Some(root), Some(subject)) = (dataset_root_of(image_path), subject) {
        if let Some(row) = participants_row(&root, &subject)? {
            found = true;
            for (k, v) in row {
                meta.entry(k).or_insert(v);
            }
        }
    }
    if !found {
        warn!("no sidecar or participants entry for {}", image_path.display());
    }
    Ok(meta)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<String>,
    pub validation: Vec<String>,
    pub test: Vec<String>,
    pub seed: u64,
    pub split_key: Option<String>,
}

impl DatasetSplit {
    pub fn bucket_of(&self, subject: &str) -> Option<usize> {
        [&self.train, &self.validation, &self.test].iter().position(|b| b.iter().any(|s| s == subject))
    }
}

/// Bucket sizes for `n` subjects: floors of `n·f`, then the leftover
/// subjects go to the largest fractional parts (earlier bucket on ties).
fn largest_remainder(n: usize, fractions: [f64; 3]) -> [usize; 3] {
    let exact = fractions.map(|f| n as f64 * f);
    let mut counts = exact.map(|e| (e + 1e-9).floor() as usize);
    let mut order: Vec<usize> = (0..3).filter(|i| fractions[*i] > 0.0).collect();
    order.sort_by(|a, b| (exact[*b] - counts[*b] as f64).total_cmp(&(exact[*a] - counts[*a] as f64)).then(a.cmp(b)));
    let mut left = n.saturating_sub(counts.iter().sum());
    for i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[*i] += 1;
        left -= 1;
    }
    counts
}

/// Subject-level split. With `split_key`, each distinct value of that key
/// is split on its own with largest-remainder rounding.
pub fn split_dataset(records: &[SubjectRecord], fractions: [f64; 3], seed: u64, split_key: Option<&str>) -> Result<DatasetSplit, BidsError> {
    if fractions.iter().any(|f| !f.is_finite() || *f < 0.0) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(BidsError::BadFractions(fractions));
    }
    let mut strata: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
    let mut seen = BTreeSet::new();
    for r in records {
        if !seen.insert(r.subject_id.clone()) {
            continue;
        }
        // stratum taken from the subject's first record in order
        let value = split_key
            .map(|k| r.metadata.get(k).map(|v| v.to_string()).unwrap_or_else(|| "n/a".into()))
            .unwrap_or_default();
        strata.entry(value).or_default().insert(r.subject_id.clone());
    }
    let buckets_needed = fractions.iter().filter(|f| **f > 0.0).count();
    if seen.len() < buckets_needed {
        return Err(BidsError::TooFewSubjects {
            subjects: seen.len(),
            buckets: buckets_needed,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut split = DatasetSplit {
        train: Vec::new(),
        validation: Vec::new(),
        test: Vec::new(),
        seed,
        split_key: split_key.map(str::to_string),
    };
    for subjects in strata.values() {
        let mut s: Vec<String> = subjects.iter().cloned().collect();
        s.shuffle(&mut rng);
        let counts = largest_remainder(s.len(), fractions);
        let (n_val, n_test) = (counts[1], counts[2]);
        split.validation.extend(s.drain(..n_val));
        split.test.extend(s.drain(..n_test));
        split.train.extend(s);
    }
    // a requested bucket left empty by rounding takes one train subject
    for (i, f) in fractions.iter().enumerate().skip(1) {
        let empty = if i == 1 { split.validation.is_empty() } else { split.test.is_empty() };
        if *f > 0.0 && empty && split.train.len() > 1 {
            let moved = split.train.pop().unwrap();
            if i == 1 {
                split.validation.push(moved);
            } else {
                split.test.push(moved);
            }
        }
    }
    for b in [&mut split.train, &mut split.validation, &mut split.test] {
        b.sort();
    }
    Ok(split)
}

fn matches_allowed(value: &MetaValue, allowed: &str) -> bool {
    let a = allowed.trim();
    for op in [">=", "<=", "!=", "==", ">", "<"] {
        if let Some(rhs) = a.strip_prefix(op) {
            let rhs = rhs.trim();
            if let (Some(x), Ok(y)) = (value.as_f64(), rhs.parse::<f64>()) {
                return match op {
                    ">=" => x >= y,
                    "<=" => x <= y,
                    ">" => x > y,
                    "<" => x < y,
                    "==" => x == y,
                    _ => x != y,
                };
            }
            return match op {
                "==" => value.to_string() == rhs,
                "!=" => value.to_string() != rhs,
                _ => false,
            };
        }
    }
    match (value.as_f64(), a.parse::<f64>()) {
        (Some(x), Ok(y)) => x == y,
        _ => value.to_string() == a,
    }
}

/// Keeps records whose metadata satisfies every key. Allowed values are
/// literal values or comparisons such as `>=18`.
pub fn filter_records(records: &[SubjectRecord], predicate: &BTreeMap<String, Vec<String>>) -> Vec<SubjectRecord> {
    let out: Vec<SubjectRecord> = records
        .iter()
        .filter(|r| {
            predicate
                .iter()
                .all(|(k, allowed)| r.metadata.get(k).is_some_and(|v| allowed.iter().any(|a| matches_allowed(v, a))))
        })
        .cloned()
        .collect();
    if out.is_empty() && !records.is_empty() {
        warn!("metadata filter removed every record");
    }
    out
}

/// Inverse-frequency weight per record for `key`.
pub fn balance_weights(records: &[SubjectRecord], key: &str) -> Result<Vec<f64>, BidsError> {
    let offenders: Vec<String> = records.iter().filter(|r| !r.metadata.contains_key(key)).map(|r| r.volume_id()).collect();
    if !offenders.is_empty() {
        return Err(BidsError::MissingKey {
            key: key.to_string(),
            offenders,
        });
    }
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for r in records {
        *counts.entry(r.metadata[key].to_string()).or_default() += 1;
    }
    Ok(records.iter().map(|r| 1.0 / counts[&r.metadata[key].to_string()] as f64).collect())
}
