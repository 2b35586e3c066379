use crate::scalar::Precision;
use std::fmt::Display;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every fallible path in the crate funnels through this enum so the CLI can
/// map failure classes onto stable exit codes: configuration problems,
/// file problems, and shape problems stay distinguishable.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch, expected {expected}, got {got}")]
    ShapeMismatch {
        op: &'static str,
        expected: String,
        got: String,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("tape already consumed by a backward pass")]
    TapeConsumed,

    #[error("i/o failure: {0}")]
    Io(#[from] std::io::Error),

    #[error("malformed file {path}: {detail}")]
    Malformed { path: String, detail: String },

    #[error("truncated file {path}: expected {expected} data bytes, found {got}")]
    Truncated {
        path: String,
        expected: usize,
        got: usize,
    },

    #[error("{path}: holds {got} data but {expected} was requested")]
    PrecisionMismatch {
        path: String,
        expected: Precision,
        got: Precision,
    },

    #[error("manifest {path}: {detail}")]
    ManifestShape { path: String, detail: String },
}

impl Error {
    pub fn shape(op: &'static str, expected: impl Display, got: impl Display) -> Self {
        Error::ShapeMismatch {
            op,
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn malformed(path: impl Display, detail: impl Into<String>) -> Self {
        Error::Malformed {
            path: path.to_string(),
            detail: detail.into(),
        }
    }

    /// Rewraps an OS error so the message names the file involved.
    pub(crate) fn io_at(path: impl Display, err: std::io::Error) -> Self {
        Error::Io(std::io::Error::new(err.kind(), format!("{path}: {err}")))
    }
}
