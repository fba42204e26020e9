// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, CbmError>;

#[derive(Debug, Error)]
pub enum CbmError {
    #[error("invalid schema: {0}")]
    Schema(String),

    #[error("invalid dataset: {0}")]
    Dataset(String),

    #[error("row {row}: category {value} out of range for group '{group}' (cardinality {cardinality})")]
    CategoryOutOfRange {
        group: String,
        row: usize,
        value: f64,
        cardinality: usize,
    },

    #[error("id '{0}' present in inputs but missing from annotations")]
    MissingId(String),

    #[error("id '{0}' present in annotations but missing from inputs")]
    UnknownId(String),

    #[error("duplicate id '{id}' at row {row}")]
    DuplicateId { id: String, row: usize },

    #[error("row {row}: {message}")]
    BadRow { row: usize, message: String },

    #[error("dimension mismatch: expected {expected}, got {actual} ({context})")]
    DimensionMismatch {
        expected: usize,
        actual: usize,
        context: String,
    },

    #[error("split: {0}")]
    Split(String),

    #[error("invalid config field '{field}': {message}")]
    Config { field: String, message: String },

    #[error("training diverged at epoch {epoch}: {message}")]
    Divergence { epoch: usize, message: String },

    #[error("non-finite value at index {index}: {context}")]
    NonFinite { index: usize, context: String },

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("reference map is constant (zero total sum of squares); R^2 undefined")]
    ConstantReference,

    #[error("lineage mismatch: {0}")]
    Lineage(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl CbmError {
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        CbmError::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CbmError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, message: impl ToString) -> Self {
        CbmError::Format {
            path: path.into(),
            message: message.to_string(),
        }
    }

    /// True for errors caused by bad user input rather than a failed computation.
    pub fn is_validation(&self) -> bool {
        !matches!(
            self,
            CbmError::Divergence { .. } | CbmError::NonFinite { .. } | CbmError::Io { .. }
        )
    }
}
