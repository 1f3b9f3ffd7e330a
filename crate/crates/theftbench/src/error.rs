//! Error type shared across the crate.

use std::path::Path;

/// Errors produced by any theftbench operation.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    /// Malformed input file (wrong format flag, bad schema, unparseable rows).
    #[error("format error: {0}")]
    Format(String),

    /// A precondition on an operation's arguments was violated.
    #[error("validation error: {0}")]
    Validation(String),

    /// Layer specs or parameter tensors are shape-incompatible.
    #[error("shape error: {0}")]
    Shape(String),

    /// A non-finite value appeared where a finite one is required.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Training loss became non-finite.
    #[error("training diverged at epoch {epoch}: {detail}")]
    Training { epoch: usize, detail: String },
}

impl Error {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Error::Io {
            path: path.display().to_string(),
            source,
        }
    }

    /// Process exit code for the CLI: 2 missing file, 3 validation/format,
    /// 4 numeric failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io { .. } => 2,
            Error::Format(_) | Error::Validation(_) | Error::Shape(_) => 3,
            Error::Numeric(_) | Error::Training { .. } => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
