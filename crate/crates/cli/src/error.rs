use std::path::{Path, PathBuf};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },

    #[error("{}: {msg}", path.display())]
    Format { path: PathBuf, msg: String },

    #[error("{field}: {msg}")]
    Param { field: String, msg: String },

    #[error("missing keys: {0}")]
    MissingKeys(String),

    #[error("{}: {msg}", path.display())]
    Unrestorable { path: PathBuf, msg: String },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Io { .. } => 3,
            CliError::Format { .. } => 4,
            CliError::Param { .. } => 5,
            CliError::MissingKeys(_) => 6,
            CliError::Unrestorable { .. } => 7,
        }
    }

    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io { path: path.to_path_buf(), source }
    }

    pub fn format(path: &Path, msg: impl ToString) -> Self {
        CliError::Format { path: path.to_path_buf(), msg: msg.to_string() }
    }

    pub fn param(field: &str, msg: impl ToString) -> Self {
        CliError::Param { field: field.to_string(), msg: msg.to_string() }
    }

    /// Maps a library error raised while processing `path`.
    pub fn from_core(path: &Path, e: tracemark::error::Error) -> Self {
        match e {
            tracemark::error::Error::Unrestorable(msg) => CliError::Unrestorable { path: path.to_path_buf(), msg },
            other => CliError::format(path, other),
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;
