//! Crate-wide error type.

use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("embedding bank at {path}: expected {expected} classes, found {found}")]
    BankClassMismatch {
        path: PathBuf,
        expected: usize,
        found: usize,
    },

    #[error("dataset error at {path}: {reason}")]
    Dataset { path: PathBuf, reason: String },

    #[error("label value {value} out of range for {classes} classes")]
    LabelOutOfRange { value: u8, classes: usize },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("non-finite value in loss term `{0}`")]
    NonFinite(String),

    #[error("unknown layer tag `{given}`; options: {options}")]
    UnknownLayer { given: String, options: String },

    #[error(transparent)]
    Candle(#[from] candle_core::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
