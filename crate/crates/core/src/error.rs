use std::io;

use thiserror::Error;

/// Errors raised anywhere in the segmentation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("input error: {0}")]
    Input(String),
    #[error("vocabulary error: unknown token id {0}")]
    Vocabulary(usize),
    #[error("sequencing error: expected frame {expected}, got {got}")]
    Sequencing { expected: usize, got: usize },
    #[error("determinism error: loss changed between identical calls ({first} vs {second})")]
    Determinism { first: f64, second: f64 },
    #[error("precondition failed: {0}")]
    Precondition(String),
    #[error("generation error: {0}")]
    Generation(String),
    #[error("calibration error: {0}")]
    Calibration(String),
    #[error("load error: {0}")]
    Load(String),
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

macro_rules! dim_err {
    ($($arg:tt)*) => {
        $crate::error::Error::Dimension(format!($($arg)*))
    };
}
pub(crate) use dim_err;
