//! Simplified transformer with low-rank attention targets: a small
//! reverse-mode tensor engine, the attention/feed-forward model, spectral
//! target synthesis, dataset generators and the experiment recipes.

pub mod config;
pub mod datasets;
pub mod envelope;
pub mod params;
pub mod pod;
pub mod report;
pub mod target;
pub mod tensor;
pub mod training;
pub mod transformer;
pub mod verify;

use thiserror::Error;

/// Any failure surfaced by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] tensor::TensorError),
    #[error(transparent)]
    Model(#[from] transformer::ModelError),
    #[error(transparent)]
    Pod(#[from] pod::PodError),
    #[error(transparent)]
    Target(#[from] target::TargetError),
    #[error(transparent)]
    Data(#[from] datasets::DataError),
    #[error(transparent)]
    Train(#[from] training::TrainError),
    #[error(transparent)]
    Config(#[from] config::ConfigError),
    #[error(transparent)]
    Report(#[from] report::ReportError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
