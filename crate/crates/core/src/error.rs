use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("format error: {0}")]
    Format(String),
    #[error("truncated input: {0}")]
    Truncated(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("architecture error: {0}")]
    Architecture(String),
    #[error("label error: label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("empty input: {0}")]
    EmptyInput(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("sequencing error: {0}")]
    Sequencing(String),
    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),
    #[error("packing error: item of size {size} exceeds bin capacity {capacity}")]
    Packing { size: usize, capacity: usize },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Precondition(_) | Error::Sequencing(_) => 1,
            Error::Numeric(_) | Error::DegenerateBatch(_) => 3,
            _ => 2,
        }
    }
}
