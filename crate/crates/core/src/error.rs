use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("index out of range: {0}")]
    Index(String),

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),

    #[error(transparent)]
    DataFormat(#[from] DataFormatError),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// True for errors caused by bad user input (configs, flags, shapes)
    /// rather than failures while running.
    pub fn is_usage(&self) -> bool {
        matches!(self, Error::Config(_) | Error::Dimension(_) | Error::Contract(_) | Error::Index(_))
    }
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad magic: expected RRMCKPT1")]
    BadMagic,
    #[error("unsupported checkpoint version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("checkpoint truncated: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("malformed checkpoint header: {0}")]
    Header(String),
    #[error("parameter mismatch for `{name}`: {detail}")]
    ParamMismatch { name: String, detail: String },
    #[error("trailing bytes after parameter payload ({0} bytes)")]
    Trailing(usize),
}

#[derive(Debug, Error)]
pub enum DataFormatError {
    #[error("truncated record at offset {offset}: {remaining} trailing bytes")]
    Truncated { offset: usize, remaining: usize },
    #[error("invalid label {label} at offset {offset}")]
    BadLabel { offset: usize, label: u8 },
    #[error("malformed dataset container: {0}")]
    Container(String),
}
