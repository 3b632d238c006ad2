use std::io;

use thiserror::Error;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("range error: {0}")]
    Range(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("frozen model: {0}")]
    Frozen(String),
    #[error("stiffness: step size fell below {min_step:e} at t = {t}")]
    Stiffness { t: f64, min_step: f64 },
    #[error("oracle error: {0}")]
    Oracle(String),
    #[error("training aborted at iteration {iteration}: {reason}")]
    TrainingAborted { iteration: usize, reason: String },
    #[error("format error: {0}")]
    Format(String),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("unsupported container version {0}")]
    Version(u16),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
