use std::path::{Path, PathBuf};

use omlc_core::Error as CoreError;
use thiserror::Error;

pub const EXIT_USAGE: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_FORMAT: i32 = 4;
pub const EXIT_NUMERIC: i32 = 5;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {msg}")]
    Image { path: PathBuf, msg: String },
    #[error("{path}: {source}")]
    Config {
        path: PathBuf,
        source: serde_json::Error,
    },
    /// Files that should describe the same encode disagree.
    #[error("{0}")]
    Mismatch(String),
    #[error(transparent)]
    Core(#[from] CoreError),
}

impl CliError {
    pub fn usage(msg: impl Into<String>) -> Self {
        CliError::Usage(msg.into())
    }

    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    /// Process exit status for this failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Config { .. } => EXIT_USAGE,
            CliError::Io { .. } | CliError::Image { .. } => EXIT_IO,
            CliError::Mismatch(_) => EXIT_FORMAT,
            CliError::Core(e) => match e {
                CoreError::Format(_) | CoreError::Coding(_) | CoreError::Checkpoint(_) => EXIT_FORMAT,
                CoreError::NonFinite(_) | CoreError::Diverged(_) => EXIT_NUMERIC,
                CoreError::Io(_) | CoreError::Csv(_) => EXIT_IO,
                CoreError::Json(_) => EXIT_FORMAT,
                _ => EXIT_USAGE,
            },
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;
