use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("time tags in channel {channel} are not sorted at index {index}")]
    Unsorted { channel: char, index: usize },

    #[error("malformed time-tag data at byte offset {offset}: {reason}")]
    Malformed { offset: u64, reason: String },

    #[error("histogram mismatch: {0}")]
    Mismatch(String),

    #[error("expected {expected} time tags, over the budget of {budget}")]
    OverBudget { expected: f64, budget: u64 },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code: 1 usage, 2 data, 3 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidParameter(_) | Error::Config(_) | Error::OverBudget { .. } => 1,
            Error::Unsorted { .. }
            | Error::Malformed { .. }
            | Error::Mismatch(_)
            | Error::Io { .. }
            | Error::Json(_) => 2,
            Error::Numerical(_) => 3,
        }
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}

macro_rules! ensure_param {
    ($cond:expr, $($arg:tt)+) => {
        if !$cond {
            return Err($crate::error::Error::InvalidParameter(format!($($arg)+)));
        }
    };
}
pub(crate) use ensure_param;
