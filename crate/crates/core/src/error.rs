use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("log of non-positive argument {0}")]
    LogDomain(f64),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error(
        "underdetermined regression: {rows} rows for {cols} regressor columns (intercept included)"
    )]
    Underdetermined { rows: usize, cols: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("no records")]
    NoRecords,

    #[error("{path}: {msg}")]
    Parse { path: PathBuf, msg: String },

    #[error("format error: {0}")]
    Format(String),

    #[error("missing cache rows: sample index {index} beyond {rows} cached rows")]
    MissingCacheRows { index: usize, rows: usize },

    #[error("empty evaluation mask")]
    EmptyMask,

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
