use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("corrupt data: {0}")]
    Corrupt(String),

    #[error("not found: {0}")]
    NotFound(String),

    #[error("duplicate entry: {0}")]
    Duplicate(String),

    #[error("stratification error: {0}")]
    Stratification(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("pipeline error: {0}")]
    Pipeline(String),

    #[error("internal error: {0}")]
    Internal(String),

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
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by stored data (files, manifests, payloads)
    /// rather than by the caller or the runtime.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            Error::Format(_)
                | Error::Corrupt(_)
                | Error::NotFound(_)
                | Error::Duplicate(_)
                | Error::Io { .. }
                | Error::Json(_)
        )
    }
}

macro_rules! shape_err {
    ($($arg:tt)*) => {
        $crate::error::Error::Shape(format!($($arg)*))
    };
}
pub(crate) use shape_err;
