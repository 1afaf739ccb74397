use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the watermarking toolkit.
#[derive(Debug, Error)]
pub enum Error {
    /// Shapes, dimensions or parameters that do not fit together.
    #[error("configuration error: {0}")]
    Config(String),

    /// A non-finite value showed up during computation.
    #[error("numeric error in {context}: {detail}")]
    Numeric { context: String, detail: String },

    /// Training produced a non-finite loss.
    #[error("training diverged at epoch {epoch}: {detail}")]
    Diverged { epoch: usize, detail: String },

    /// Malformed input data. `offset` is the byte offset of the offending record.
    #[error("data error at byte offset {offset}: {detail}")]
    Data { offset: u64, detail: String },

    /// A file failed validation (bad magic, checksum, family invariant, ...).
    #[error("invalid file: {0}")]
    Invalid(String),

    /// A file was written by a newer (or unknown) format version.
    #[error("unsupported format version {found} (this build reads up to {supported})")]
    Version { found: u32, supported: u32 },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn numeric(context: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Numeric {
            context: context.into(),
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
