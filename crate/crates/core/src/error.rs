use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Coarse classification used by the CLI to pick an exit status.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Divergence,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("format error: {0}")]
    Format(String),
    #[error("length error: expected {expected} bytes, found {found}")]
    Length { expected: u64, found: u64 },
    #[error("shape contract violated for `{tensor}`: expected {expected}, got {got}")]
    Shape {
        tensor: String,
        expected: String,
        got: String,
    },
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("evaluation error: {0}")]
    Evaluation(String),
    #[error("training diverged at step {step}: loss = {loss}")]
    Divergence { step: usize, loss: f64 },
    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
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

    pub(crate) fn shape(
        tensor: impl Into<String>,
        expected: impl std::fmt::Debug,
        got: impl std::fmt::Debug,
    ) -> Self {
        Error::Shape {
            tensor: tensor.into(),
            expected: format!("{expected:?}"),
            got: format!("{got:?}"),
        }
    }

    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(_) => ErrorKind::Config,
            Error::Divergence { .. } => ErrorKind::Divergence,
            _ => ErrorKind::Data,
        }
    }
}
