//! Synthetic BIDS datasets: noisy volumes with tubular and spherical
//! foreground, used by the tests and the examples in the README.

use std::fs;
use std::path::Path;

use ndarray::{Array3, Array4};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::transforms::derive_seed;
use crate::volume::{write_nifti, NiftiError, Volume};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SynthTask {
    /// One to three spheres or tubes of a few millimetres.
    Shapes,
    /// A single small sphere, for detection plus segmentation.
    SmallObject,
}

#[derive(Debug, Clone)]
pub struct SynthSpec {
    pub subjects: usize,
    pub shape: [usize; 3],
    pub spacing: [f64; 3],
    /// Foreground contrast over noise standard deviation.
    pub snr: f64,
    pub seed: u64,
    pub task: SynthTask,
    pub contrasts: Vec<String>,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            subjects: 40,
            shape: [64, 64, 16],
            spacing: [1.0, 1.0, 2.0],
            snr: 5.0,
            seed: 0,
            task: SynthTask::Shapes,
            contrasts: vec!["T1w".to_string()],
        }
    }
}

/// Image channels (one per contrast) and the binary label of one subject.
#[derive(Debug, Clone)]
pub struct SynthSubject {
    pub images: Vec<Volume>,
    pub label: Volume,
}

fn dist_to_segment(p: [f64; 3], a: [f64; 3], b: [f64; 3]) -> f64 {
    let ab = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
    let ap = [p[0] - a[0], p[1] - a[1], p[2] - a[2]];
    let len2 = ab.iter().map(|v| v * v).sum::<f64>();
    let t = if len2 > 0.0 { (ap.iter().zip(&ab).map(|(x, y)| x * y).sum::<f64>() / len2).clamp(0.0, 1.0) } else { 0.0 };
    (0..3).map(|i| (ap[i] - t * ab[i]).powi(2)).sum::<f64>().sqrt()
}

fn paint<F: Fn([f64; 3]) -> bool>(label: &mut Array3<f32>, spacing: [f64; 3], inside: F) {
    for ((i, j, k), v) in label.indexed_iter_mut() {
        if inside([i as f64 * spacing[0], j as f64 * spacing[1], k as f64 * spacing[2]]) {
            *v = 1.0;
        }
    }
}

fn random_label(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Array3<f32> {
    let [x, y, z] = spec.shape;
    let ext = [0, 1, 2].map(|i| spec.shape[i] as f64 * spec.spacing[i]);
    let mut label = Array3::<f32>::zeros((x, y, z));
    let point = |rng: &mut ChaCha8Rng, margin: [f64; 3]| -> [f64; 3] { [0, 1, 2].map(|i| rng.random_range(margin[i]..(ext[i] - margin[i]).max(margin[i] + 1e-6))) };
    match spec.task {
        SynthTask::Shapes => {
            let n = rng.random_range(1..=3);
            for _ in 0..n {
                if rng.random_bool(0.5) {
                    let r = rng.random_range(4.0..8.0);
                    let c = point(rng, [r + 2.0, r + 2.0, (r * 0.5).min(ext[2] / 3.0)]);
                    paint(&mut label, spec.spacing, |p| (0..3).map(|i| (p[i] - c[i]).powi(2)).sum::<f64>() <= r * r);
                } else {
                    let r = rng.random_range(2.5..4.0);
                    let a = point(rng, [r + 2.0, r + 2.0, 0.0]);
                    let b = point(rng, [r + 2.0, r + 2.0, 0.0]);
                    paint(&mut label, spec.spacing, |p| dist_to_segment(p, a, b) <= r);
                }
            }
        }
        SynthTask::SmallObject => {
            let r = rng.random_range(2.0..3.5);
            let c = point(rng, [r + 3.0, r + 3.0, r + 1.0]);
            paint(&mut label, spec.spacing, |p| (0..3).map(|i| (p[i] - c[i]).powi(2)).sum::<f64>() <= r * r);
        }
    }
    label
}

/// Deterministic subject `index` of the dataset described by `spec`.
pub fn synth_subject(spec: &SynthSpec, index: usize) -> SynthSubject {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, "synth", index));
    let label = random_label(spec, &mut rng);
    let noise = Normal::new(0.0, 1.0 / spec.snr).expect("finite snr");
    let [x, y, z] = spec.shape;
    let images = (0..spec.contrasts.len())
        .map(|c| {
            let gain = 1.0 + 0.5 * c as f32;
            let data = Array4::from_shape_fn((1, x, y, z), |(_, i, j, k)| gain * (label[[i, j, k]] + noise.sample(&mut rng) as f32));
            Volume::from_array(data, spec.spacing).expect("valid synthetic volume")
        })
        .collect();
    let label = Volume::from_array(label.insert_axis(ndarray::Axis(0)), spec.spacing).expect("valid synthetic label");
    SynthSubject { images, label }
}

pub fn subject_id(index: usize) -> String {
    format!("sub-{:02}", index + 1)
}

/// Writes `spec.subjects` subjects as a BIDS tree under `root`, with labels
/// in `derivatives/labels`, a `participants.tsv` and JSON sidecars.
pub fn generate_dataset(root: &Path, spec: &SynthSpec) -> std::io::Result<Vec<String>> {
    let nii = |e: NiftiError| std::io::Error::other(e.to_string());
    fs::create_dir_all(root)?;
    fs::write(root.join("dataset_description.json"), r#"{"Name": "synthetic", "BIDSVersion": "1.8.0"}"#)?;
    let mut participants = String::from("participant_id\tage\tsex\tsite\n");
    let mut ids = Vec::with_capacity(spec.subjects);
    for s in 0..spec.subjects {
        let id = subject_id(s);
        let subject = synth_subject(spec, s);
        let site = if s % 2 == 0 { "A" } else { "B" };
        participants.push_str(&format!("{id}\t{}\t{}\t{site}\n", 20 + (s * 7) % 50, if s % 3 == 0 { "F" } else { "M" }));
        let anat = root.join(&id).join("anat");
        let lab = root.join("derivatives").join("labels").join(&id).join("anat");
        fs::create_dir_all(&anat)?;
        fs::create_dir_all(&lab)?;
        for (c, contrast) in spec.contrasts.iter().enumerate() {
            let stem = format!("{id}_{contrast}");
            write_nifti(&subject.images[c], anat.join(format!("{stem}.nii.gz"))).map_err(nii)?;
            let sidecar = format!(r#"{{"Manufacturer": "{}", "RepetitionTime": 2.0}}"#, if site == "A" { "Siemens" } else { "GE" });
            fs::write(anat.join(format!("{stem}.json")), sidecar)?;
            write_nifti(&subject.label, lab.join(format!("{stem}_seg.nii.gz"))).map_err(nii)?;
        }
        ids.push(id);
    }
    fs::write(root.join("participants.tsv"), participants)?;
    Ok(ids)
}
