use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("scaler fit failed: {0}")]
    Fit(String),

    #[error("sequence length {len} exceeds model max_len {max_len}")]
    Length { len: usize, max_len: usize },

    #[error("training failed at step {step}: {reason}")]
    Training { step: u64, reason: String },

    #[error("format error in {field}: {reason}")]
    Format { field: &'static str, reason: String },

    #[error("unsupported {what} version {found} (expected {expected})")]
    UnsupportedVersion { what: &'static str, found: u32, expected: u32 },

    #[error("checksum mismatch: stored {stored:#018x}, computed {computed:#018x}")]
    Checksum { stored: u64, computed: u64 },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn format(field: &'static str, reason: impl Into<String>) -> Self {
        Error::Format { field, reason: reason.into() }
    }
}
