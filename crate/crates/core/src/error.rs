use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Two operands live on different grids.
    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    /// The explicit time step exceeds the stability bound.
    #[error("CFL violation: dt = {dt} s exceeds the maximal stable step {max_stable_dt} s")]
    Cfl { dt: f64, max_stable_dt: f64 },

    /// The optimizer left the stable regime during a fit.
    #[error("fit aborted at iteration {iteration}: {source}")]
    FitDiverged {
        iteration: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("malformed container header {path}: {reason}")]
    Header { path: PathBuf, reason: String },

    #[error("byte count mismatch in {path}: expected {expected} bytes, found {actual}")]
    ByteCount {
        path: PathBuf,
        expected: u64,
        actual: u64,
    },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for failures of the numerics (as opposed to bad input).
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::Cfl { .. } | Error::FitDiverged { .. } | Error::NonFinite(_)
        )
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
