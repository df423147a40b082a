use std::io;
use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("value out of range: {0}")]
    Range(String),
    #[error("non-finite value produced by {0}")]
    NonFinite(String),
    #[error("stale cache {path:?}: fingerprint {found:#018x} does not match expected {expected:#018x}")]
    StaleCache {
        path: PathBuf,
        expected: u64,
        found: u64,
    },
    #[error("architecture mismatch: fingerprint {found:#018x}, expected {expected:#018x}")]
    Architecture { expected: u64, found: u64 },
    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },
    #[error("empty batch")]
    EmptyBatch,
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Shape(msg.into()))
}

pub(crate) fn config_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Config(msg.into()))
}
