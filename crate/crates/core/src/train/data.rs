use std::collections::BTreeMap;

use log::warn;
use ndarray::{s, Array4, Axis};

use super::TrainError;
use crate::bids::{filter_records, index_dataset, split_dataset, DatasetSplit, SubjectRecord};
use crate::config::ExperimentConfig;
use crate::meta::{MetaValue, Metadata};
use crate::models::Architecture;
use crate::transforms::{apply_pipeline, Sample, TransformRecord, TransformSpec};
use crate::volume::{apply_affine, bounding_box, extract_units, read_nifti, SampleUnit, UnitError, UnitSpec, Volume};

#[derive(Debug, Clone)]
pub struct Dataset {
    pub records: Vec<SubjectRecord>,
    pub split: DatasetSplit,
}

/// Indexes every contrast used by any split, applies the metadata filter
/// and splits subjects.
pub fn index_and_split(cfg: &ExperimentConfig) -> Result<Dataset, TrainError> {
    let l = &cfg.loader;
    let mut contrasts = l.contrasts.train_validation.clone();
    for c in l.test_contrasts() {
        if !contrasts.contains(c) {
            contrasts.push(c.clone());
        }
    }
    let records = index_dataset(&l.bids_path, &contrasts, &l.target_suffix)?;
    let records = filter_records(&records, &l.metadata_filter);
    if records.is_empty() {
        return Err(TrainError::Data("no image passes loader.metadata_filter".into()));
    }
    let split = split_dataset(&records, cfg.split.fractions, cfg.split.seed, cfg.split.split_key.as_deref())?;
    Ok(Dataset { records, split })
}

/// One input as read from disk: image channels, stacked labels and merged
/// metadata.
#[derive(Debug, Clone)]
pub struct LoadedVolume {
    /// Output name: subject, then session and contrast when needed to be
    /// unique.
    pub id: String,
    pub subject_id: String,
    pub image: Volume,
    pub label: Option<Volume>,
    pub metadata: Metadata,
    pub availability: Vec<bool>,
}

fn read_labels(rec: &SubjectRecord, image: &Volume) -> Result<Option<Volume>, TrainError> {
    if rec.label_paths.is_empty() {
        return Ok(None);
    }
    let [x, y, z] = image.shape3();
    let mut data = Array4::<f32>::zeros((rec.label_paths.len(), x, y, z));
    for (k, p) in rec.label_paths.iter().enumerate() {
        let v = read_nifti(p)?;
        if v.shape3() != image.shape3() {
            return Err(TrainError::Data(format!(
                "label {} has shape {:?}, image {} has {:?}",
                p.display(),
                v.shape3(),
                rec.image_path.display(),
                image.shape3()
            )));
        }
        data.index_axis_mut(Axis(0), k).assign(&v.data.index_axis(Axis(0), 0));
    }
    Ok(Some(image.with_data(data)?))
}

fn base_id(rec: &SubjectRecord) -> String {
    match &rec.session_id {
        Some(s) => format!("{}_{}", rec.subject_id, s),
        None => rec.subject_id.clone(),
    }
}

/// Reads the images of `subjects` restricted to `contrasts`. With
/// multichannel loading, the contrasts of a session become channels in the
/// given order; a missing contrast is either zero-filled and marked
/// unavailable (hemis) or drops the session.
pub fn load_volumes(cfg: &ExperimentConfig, records: &[SubjectRecord], subjects: &[String], contrasts: &[String]) -> Result<Vec<LoadedVolume>, TrainError> {
    let wanted: Vec<&SubjectRecord> = records
        .iter()
        .filter(|r| subjects.contains(&r.subject_id) && contrasts.contains(&r.contrast))
        .collect();
    let mut out = Vec::new();
    if !cfg.loader.multichannel {
        for rec in wanted {
            let image = read_nifti(&rec.image_path)?;
            let channel0 = image.with_data(image.data.slice(s![0..1, .., .., ..]).to_owned())?;
            let label = read_labels(rec, &channel0)?;
            let mut metadata = rec.metadata.clone();
            metadata.entry("contrast".into()).or_insert_with(|| MetaValue::Text(rec.contrast.clone()));
            let id = if contrasts.len() > 1 {
                format!("{}_{}", base_id(rec), rec.contrast)
            } else {
                base_id(rec)
            };
            out.push(LoadedVolume {
                id,
                subject_id: rec.subject_id.clone(),
                image: channel0,
                label,
                metadata,
                availability: vec![true],
            });
        }
        return Ok(out);
    }

    let hemis = cfg.model.architecture == Architecture::HemisUnet;
    let mut groups: BTreeMap<String, BTreeMap<&str, &SubjectRecord>> = BTreeMap::new();
    for rec in wanted {
        groups.entry(base_id(rec)).or_default().insert(rec.contrast.as_str(), rec);
    }
    for (id, by_contrast) in groups {
        let present: Vec<Option<&SubjectRecord>> = contrasts.iter().map(|c| by_contrast.get(c.as_str()).copied()).collect();
        if !hemis && present.iter().any(Option::is_none) {
            warn!("{id}: skipped, missing contrasts for multichannel loading");
            continue;
        }
        let mut images: Vec<Option<Volume>> = Vec::with_capacity(contrasts.len());
        for rec in &present {
            images.push(match rec {
                Some(r) => Some(read_nifti(&r.image_path)?),
                None => None,
            });
        }
        let reference = images.iter().flatten().next().expect("group has at least one image").clone();
        let [x, y, z] = reference.shape3();
        let mut data = Array4::<f32>::zeros((contrasts.len(), x, y, z));
        for (c, img) in images.iter().enumerate() {
            if let Some(img) = img {
                if img.shape3() != reference.shape3() {
                    return Err(TrainError::Data(format!("{id}: contrasts have different grids")));
                }
                data.index_axis_mut(Axis(0), c).assign(&img.data.index_axis(Axis(0), 0));
            }
        }
        let image = reference.with_data(data)?;
        let first_labeled = present.iter().flatten().find(|r| !r.label_paths.is_empty());
        let label = match first_labeled {
            Some(r) => read_labels(r, &reference)?,
            None => None,
        };
        let first = present.iter().flatten().next().unwrap();
        out.push(LoadedVolume {
            id,
            subject_id: first.subject_id.clone(),
            image,
            label,
            metadata: first.metadata.clone(),
            availability: present.iter().map(Option::is_some).collect(),
        });
    }
    Ok(out)
}

/// A volume after deterministic preprocessing, with the records needed to
/// map predictions back to the native grid.
#[derive(Debug, Clone)]
pub struct PreparedVolume {
    pub id: String,
    pub subject_id: String,
    pub image: Volume,
    pub label: Option<Volume>,
    pub metadata: Metadata,
    pub availability: Vec<bool>,
    pub records: Vec<TransformRecord>,
    pub native: Volume,
}

pub fn prepare_volume(v: &LoadedVolume, preprocessing: &[TransformSpec]) -> Result<PreparedVolume, TrainError> {
    let (out, records) = apply_pipeline(&Sample::from_volume(&v.image, v.label.as_ref()), preprocessing, 0)?;
    Ok(PreparedVolume {
        id: v.id.clone(),
        subject_id: v.subject_id.clone(),
        image: out.image_volume()?,
        label: out.label_volume()?,
        metadata: v.metadata.clone(),
        availability: v.availability.clone(),
        records,
        native: v.image.clone(),
    })
}

pub fn prepare_volumes(vols: &[LoadedVolume], preprocessing: &[TransformSpec]) -> Result<Vec<PreparedVolume>, TrainError> {
    vols.iter().map(|v| prepare_volume(v, preprocessing)).collect()
}

/// Crops image and label to the label's bounding box grown by `margin`.
/// Volumes with an empty label are kept whole.
pub fn roi_crop(v: &PreparedVolume, margin: usize) -> Result<PreparedVolume, TrainError> {
    let Some(label) = &v.label else {
        return Ok(v.clone());
    };
    let b = match bounding_box(label, margin) {
        Ok(b) => b,
        Err(UnitError::EmptyMask) => return Ok(v.clone()),
        Err(e) => return Err(e.into()),
    };
    let cut = |vol: &Volume| -> Result<Volume, TrainError> {
        let data = vol.data.slice(s![.., b.min[0]..=b.max[0], b.min[1]..=b.max[1], b.min[2]..=b.max[2]]).to_owned();
        let mut affine = vol.affine;
        let origin = apply_affine(&vol.affine, b.min.map(|x| x as f64));
        for (r, o) in origin.iter().enumerate() {
            affine[r][3] = *o;
        }
        Ok(Volume::new(data, vol.spacing, affine)?)
    };
    let mut out = v.clone();
    out.image = cut(&v.image)?;
    out.label = Some(cut(label)?);
    Ok(out)
}

pub fn volume_units(v: &PreparedVolume, spec: &UnitSpec) -> Result<Vec<SampleUnit>, TrainError> {
    let mut units = extract_units(&v.image, v.label.as_ref(), spec, &v.id, &v.metadata)?;
    for u in &mut units {
        u.availability.clone_from(&v.availability);
    }
    Ok(units)
}
