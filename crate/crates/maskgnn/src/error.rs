//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed row at line {line} of {path}: {reason}")]
    Parse {
        path: String,
        line: usize,
        reason: String,
    },

    #[error("edge references unknown node id {id}")]
    UnknownNode { id: String },

    #[error("ingestion error: {0}")]
    Ingest(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("class {class} has {count} nodes, fewer than the {parts} partitions")]
    ClassTooSmall {
        class: usize,
        count: usize,
        parts: usize,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("checksum mismatch in {path}: stored {stored}, computed {computed}")]
    Checksum {
        path: String,
        stored: String,
        computed: String,
    },

    #[error("model fingerprint mismatch: cache built for a different model")]
    Fingerprint,
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
