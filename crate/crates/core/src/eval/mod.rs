//! Inference in native space, uncertainty estimation, post-processing,
//! metrics, threshold search and CSV reports.

mod components;
mod inference;
mod metrics;
mod postprocess;
mod threshold;
mod uncertainty;

pub use components::label_components;
pub use inference::{segment_volume, tta_eligible, InferenceSettings};
pub use metrics::{
    compute_metrics, format_sig6, hausdorff_mm, lesion_counts, mean_dice, size_binned_metrics, surface, write_report, Confusion, EvalRow,
    LesionCounts, LESION_OVERLAP, REPORT_HEADER,
};
pub use postprocess::{fill_holes, postprocess, PostStep};
pub use threshold::{optimal_threshold, threshold_grid, ThresholdCriterion};
pub use uncertainty::{
    object_scores, object_uncertainty, sample_predictions, voxel_uncertainty, ObjectScore, PredictionSet, PredictionSource, SamplingOverrides,
    UncertaintyMeasure, UncertaintyMode,
};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("geometry mismatch: {0}")]
    Geometry(String),
    #[error("{0}")]
    InvalidParam(String),
    #[error("i/o: {0}")]
    Io(String),
    #[error(transparent)]
    Model(#[from] crate::models::ModelError),
    #[error(transparent)]
    Transform(#[from] crate::transforms::TransformError),
    #[error(transparent)]
    Volume(#[from] crate::volume::VolumeError),
    #[error(transparent)]
    Units(#[from] crate::volume::UnitError),
}
