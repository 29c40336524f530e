//! Crate-wide error type and CLI exit-code mapping.

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Error, Debug)]
pub enum Error {
    #[error("audio: {0}")]
    Audio(String),
    #[error("wav {path}: {msg}")]
    Wav { path: PathBuf, msg: String },
    #[error("metric: {0}")]
    Metric(String),
    #[error("simulation: {0}")]
    Sim(String),
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("feature file: {0}")]
    FeatureFormat(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("training: {0}")]
    Train(String),
    #[error("non-finite loss at step {step} (sample {sample})")]
    NonFiniteLoss { step: u64, sample: String },
    #[error("evaluation: {0}")]
    Eval(String),
    #[error("analysis: {0}")]
    Analysis(String),
    #[error("config: {0}")]
    Config(String),
    #[error("usage: {0}")]
    Usage(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Exit code contract of the `tsb` binary: 1 usage error, 2 data error,
    /// 3 numeric failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) | Error::Config(_) => 1,
            Error::NonFiniteLoss { .. } => 3,
            _ => 2,
        }
    }
}
