use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid argument to {op}: {detail}")]
    InvalidArgument { op: &'static str, detail: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{what} is undefined: {detail}")]
    Degenerate { what: &'static str, detail: String },

    #[error("non-finite value produced at {stage}")]
    NonFinite { stage: String },

    #[error("malformed {format} data at byte {offset}: {detail}")]
    Format {
        format: &'static str,
        offset: u64,
        detail: String,
    },

    #[error("checkpoint {check} check failed: {detail}")]
    Checkpoint { check: &'static str, detail: String },

    #[error("png codec: {0}")]
    Png(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub fn invalid(op: &'static str, detail: impl Into<String>) -> Self {
        Error::InvalidArgument {
            op,
            detail: detail.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
