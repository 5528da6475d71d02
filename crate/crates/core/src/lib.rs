//! Config-driven training and evaluation of segmentation networks on
//! BIDS-organized medical imaging datasets.

pub mod bids;
pub mod config;
pub mod distance;
pub mod eval;
pub mod losses;
pub mod meta;
pub mod models;
pub mod nn;
pub mod report;
pub mod synth;
pub mod train;
pub mod transforms;
pub mod volume;
