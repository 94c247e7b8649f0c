//! Experiment harness: dataset model, synthetic phantom generator,
//! leave-one-patient-out cross-validation and report emission.

pub mod dataset;
pub mod folds;
pub mod synth;
pub mod trainer;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("pgm error: {0}")]
    Pgm(#[from] crate::pgm::PgmError),
    #[error("image error: {0}")]
    Image(#[from] crate::imageops::ImageError),
    #[error("tensor error: {0}")]
    Tensor(#[from] crate::tensor::TensorError),
    #[error("stats error: {0}")]
    Stats(#[from] crate::stats::StatsError),
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, HarnessError>;
