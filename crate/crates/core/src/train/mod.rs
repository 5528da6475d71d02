//! End-to-end training: data loading, the optimization loop, checkpoints,
//! layer freezing, the missing-modality curriculum, grid launches and
//! evaluation runs.

mod checkpoint;
mod curriculum;
mod data;
mod evaluate;
mod freeze;
mod grid;
mod trainer;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointState, CHECKPOINT_MAGIC};
pub use curriculum::{drop_probability, modality_curriculum, Availability};
pub use data::{index_and_split, load_volumes, prepare_volume, prepare_volumes, roi_crop, volume_units, Dataset, LoadedVolume, PreparedVolume};
pub use evaluate::{inference_settings, run_test, segment_file, TestReport};
pub use freeze::{freeze_layers, parameter_groups};
pub use grid::{automate_grid, expand_grid, plan_grid, read_grid, GridResult, GridRun};
pub use trainer::{run_training, train_from_volumes, write_history, HistoryRow, RunOptions, TrainOutcome, TrainingHistory};

use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Config(#[from] crate::config::ConfigError),
    #[error(transparent)]
    Bids(#[from] crate::bids::BidsError),
    #[error(transparent)]
    Nifti(#[from] crate::volume::NiftiError),
    #[error(transparent)]
    Model(#[from] crate::models::ModelError),
    #[error(transparent)]
    Transform(#[from] crate::transforms::TransformError),
    #[error(transparent)]
    Units(#[from] crate::volume::UnitError),
    #[error(transparent)]
    Volume(#[from] crate::volume::VolumeError),
    #[error(transparent)]
    Loss(#[from] crate::losses::LossError),
    #[error(transparent)]
    Eval(#[from] crate::eval::EvalError),
    #[error("the {0} bucket is empty")]
    EmptyBucket(&'static str),
    #[error("data: {0}")]
    Data(String),
    #[error("non-finite loss {value} at epoch {epoch}, batch {batch}")]
    NonFinite { epoch: usize, batch: usize, value: f64 },
    #[error("checkpoint {path}: {msg}")]
    Checkpoint { path: PathBuf, msg: String },
    #[error("checkpoint was written for config {found}, current config is {expected}")]
    FingerprintMismatch { expected: String, found: String },
    #[error("freeze pattern `{pattern}` matches no parameter; groups are: {}", .groups.join(", "))]
    FreezePattern { pattern: String, groups: Vec<String> },
    #[error("curriculum: {0}")]
    Curriculum(String),
    #[error("grid: {0}")]
    Grid(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

impl TrainError {
    /// Errors caused by the inputs rather than by the run itself.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            TrainError::Config(_) | TrainError::FreezePattern { .. } | TrainError::Curriculum(_) | TrainError::FingerprintMismatch { .. } | TrainError::Grid(_)
        )
    }
}

pub(crate) fn io_err(path: &std::path::Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io { path: path.to_path_buf(), source }
}

#[cfg(test)]
mod tests;
