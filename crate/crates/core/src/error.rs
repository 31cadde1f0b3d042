use chrono::NaiveDate;
use thiserror::Error;

use crate::market_data::IngestError;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Ingest(#[from] IngestError),

    #[error("window of {n_days} days ending {last_day} lies outside the dataset")]
    OutOfRange { last_day: NaiveDate, n_days: usize },

    #[error("insufficient history for {day}: {detail}")]
    InsufficientHistory { day: NaiveDate, detail: String },

    #[error("feature column {index} ({name}) has zero variance")]
    ConstantColumn { index: usize, name: String },

    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    #[error("sigma must be positive, got {0}")]
    NonPositiveSigma(f64),

    #[error("distributional forecast requires a Gaussian head")]
    WrongHead,

    #[error("naive MAE is zero, relative MAE is undefined")]
    DivisionByZero,

    #[error("loss differential is identically zero (forecasts are equally accurate at every point)")]
    DegenerateDifferential,

    #[error("coordinate descent did not converge within {iterations} sweeps (target hour {hour:?})")]
    DidNotConverge { iterations: usize, hour: Option<usize> },

    #[error("invalid split: {0}")]
    InvalidSplit(String),

    #[error("forecast tables are misaligned: {0}")]
    Misaligned(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("serialization: {0}")]
    Serde(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(expected: impl ToString, got: impl ToString) -> Self {
        Error::ShapeMismatch {
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }

    pub(crate) fn insufficient(day: NaiveDate, detail: impl Into<String>) -> Self {
        Error::InsufficientHistory {
            day,
            detail: detail.into(),
        }
    }
}
