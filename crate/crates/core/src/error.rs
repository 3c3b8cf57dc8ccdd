//! Error type shared by all modules.

use std::path::PathBuf;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error on {path}: {message}")]
    Csv { path: PathBuf, message: String },

    #[error("bad file format in {path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("non-finite value in {matrix} at row {row}, column {col}")]
    NonFinite {
        matrix: &'static str,
        row: usize,
        col: usize,
    },

    #[error("duplicate index points: rows {first} and {second} are identical")]
    DuplicateLocations { first: usize, second: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("n = {n} exceeds the dense materialization cap {cap}")]
    DenseCapExceeded { n: usize, cap: usize },

    #[error("Cholesky factorization failed ({context}) even after adding jitter {jitter:e}")]
    CholeskyFailed { context: String, jitter: f64 },

    #[error(
        "likelihood covariance not positive definite at sigma2 = {sigma2:e}, tau2 = {tau2:e}"
    )]
    LikelihoodCholesky { sigma2: f64, tau2: f64 },

    #[error("federation protocol error: {0}")]
    Protocol(String),

    #[error("checksum mismatch in message from center {center_id}")]
    Checksum { center_id: u64 },

    #[error("chain {sketch_id} aborted at iteration {iteration}: {source}")]
    ChainAborted {
        sketch_id: usize,
        iteration: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("invalid configuration: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: message.into(),
        }
    }

    /// Whether the error points at bad user input (paths, shapes, config)
    /// rather than an internal numerical or protocol failure.
    pub fn is_user_error(&self) -> bool {
        matches!(
            self,
            Error::Io { .. }
                | Error::Csv { .. }
                | Error::Format { .. }
                | Error::Dimension(_)
                | Error::NonFinite { .. }
                | Error::DuplicateLocations { .. }
                | Error::InvalidArgument(_)
                | Error::DenseCapExceeded { .. }
                | Error::Config(_)
        )
    }
}
