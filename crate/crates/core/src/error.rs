//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch for {context}: expected {expected}, got {actual}")]
    ShapeMismatch {
        context: String,
        expected: String,
        actual: String,
    },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("numerical error at {context}: {detail}")]
    Numerical { context: String, detail: String },

    #[error("parameter mismatch: {0}")]
    ParamMismatch(String),

    #[error("index out of range: {0}")]
    OutOfRange(String),

    #[error("degenerate variance: {0}")]
    DegenerateVariance(String),

    #[error("manifest error at {path}:{line}: {detail}")]
    Manifest {
        path: String,
        line: usize,
        detail: String,
    },

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed file {path}: {detail}")]
    Format { path: String, detail: String },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }

    pub fn shape(
        context: impl Into<String>,
        expected: impl Into<String>,
        actual: impl Into<String>,
    ) -> Self {
        Error::ShapeMismatch {
            context: context.into(),
            expected: expected.into(),
            actual: actual.into(),
        }
    }

    /// True for errors caused by bad user input rather than runtime failures.
    /// The CLI maps these to exit code 1, everything else to exit code 2.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::ShapeMismatch { .. }
                | Error::InvalidConfig(_)
                | Error::InvalidArgument(_)
                | Error::OutOfRange(_)
                | Error::Manifest { .. }
                | Error::Format { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
