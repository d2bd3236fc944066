//! Error type shared across the engine.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum RecorrError {
    /// A contract violation on shapes: mismatched dims or channel counts.
    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    ShapeMismatch {
        context: &'static str,
        expected: String,
        got: String,
    },

    /// An argument outside its documented domain (even radius, zero dims, ...).
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A malformed configuration file or inconsistent config values.
    #[error("config error: {0}")]
    Config(String),

    /// A malformed or unreadable data file (.vol3, checkpoint, manifest).
    #[error("data error: {0}")]
    Data(String),

    /// A non-finite value surfaced where the pipeline requires finite math.
    #[error("numerical failure: {0}")]
    NonFinite(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, RecorrError>;

impl RecorrError {
    pub fn shape(context: &'static str, expected: impl Into<String>, got: impl Into<String>) -> Self {
        RecorrError::ShapeMismatch {
            context,
            expected: expected.into(),
            got: got.into(),
        }
    }
}
