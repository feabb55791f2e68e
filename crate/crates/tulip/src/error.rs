//! Error type shared across the crate.
//!
//! Every fallible public operation returns [`Error`]; variants are
//! distinguishable so callers (and the CLI exit-code mapping) can tell
//! configuration mistakes from runtime failures.

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller-supplied argument violates a documented precondition.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Matrix/vector dimensions do not line up.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// An operation was asked of a model that cannot support it
    /// (e.g. switch counts on a model with fewer than two exits).
    #[error("unsupported configuration: {0}")]
    UnsupportedConfiguration(String),

    /// Training produced a non-finite loss.
    #[error("training diverged: non-finite loss at epoch {epoch}")]
    TrainingDiverged { epoch: usize },

    /// Proxy labels contain a single class, so no separating fit exists.
    #[error("degenerate labels: {0}")]
    DegenerateLabels(String),

    /// A least-squares fit has no information to work with.
    #[error("degenerate fit: {0}")]
    DegenerateFit(String),

    /// A numeric routine failed (singular system, non-convergence).
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// A cell of an input file failed to parse; positions are 1-based,
    /// rows count data rows (the header is row 0).
    #[error("parse error at row {row}, column {column}: {message}")]
    Parse {
        row: usize,
        column: usize,
        message: String,
    },

    /// An input file is structurally unusable (missing header, missing
    /// label column, no data rows).
    #[error("schema error: {0}")]
    Schema(String),

    /// A config file failed validation; the message names the field.
    #[error("config error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serialization(String),
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serialization(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        // Surface the underlying io error (missing file etc.) as Io so
        // exit-code mapping treats it as a runtime failure, not usage.
        match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::Io(io),
            other => Error::Serialization(format!("csv error: {other:?}")),
        }
    }
}

impl Error {
    /// True for errors that indicate a bad config or bad arguments
    /// rather than a runtime failure. The CLI maps these to exit code 1
    /// and everything else to exit code 2.
    pub fn is_usage(&self) -> bool {
        matches!(
            self,
            Error::InvalidArgument(_)
                | Error::Config(_)
                | Error::Schema(_)
                | Error::Parse { .. }
                | Error::UnsupportedConfiguration(_)
        )
    }
}
