use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("bad magic in feature store")]
    BadMagic,

    #[error("unsupported feature store version {0}")]
    UnsupportedVersion(u32),

    #[error("feature store was written with a foreign byte order")]
    Endianness,

    #[error("truncated feature store: {0}")]
    Truncated(String),

    #[error("checksum mismatch for tensor `{0}`")]
    Checksum(String),

    #[error("missing tensor `{0}`")]
    MissingTensor(String),

    #[error("insufficient samples for classes {classes:?} (need {needed} each)")]
    InsufficientSamples { classes: Vec<usize>, needed: usize },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
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

    /// A file that was asked for does not exist.
    pub fn is_not_found(&self) -> bool {
        matches!(self, Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound)
    }

    /// Short machine-readable tag, used by the CLI's error JSON.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "shape",
            Error::Contract(_) => "contract",
            Error::Format(_) => "format",
            Error::BadMagic => "bad_magic",
            Error::UnsupportedVersion(_) => "unsupported_version",
            Error::Endianness => "endianness",
            Error::Truncated(_) => "truncated",
            Error::Checksum(_) => "checksum",
            Error::MissingTensor(_) => "missing_tensor",
            Error::InsufficientSamples { .. } => "insufficient_samples",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
        }
    }
}
