use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the filters, analysis routines and the experiment harness.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("matrix is not positive definite: {0}")]
    NonPositiveDefinite(String),

    #[error("every log-weight is -inf")]
    AllWeightsDegenerate,

    #[error("cannot moment-match an empty mixture")]
    EmptyMixture,

    #[error("system is not stable: spectral radius {0}")]
    UnstableSystem(f64),

    #[error("{0} devices is too many to enumerate access patterns (limit {1})")]
    TooManyDevices(usize, usize),

    #[error("hypothesis budget exceeded: {requested} > {budget}")]
    HypothesisBudgetExceeded { requested: usize, budget: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("config error at `{key}` (line {line}): {message}")]
    Config {
        key: String,
        line: usize,
        message: String,
    },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("CSV error on {path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
}

impl Error {
    /// True for errors that come from the numerics rather than from user input or I/O.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NonPositiveDefinite(_)
                | Error::AllWeightsDegenerate
                | Error::EmptyMixture
                | Error::UnstableSystem(_)
                | Error::HypothesisBudgetExceeded { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
