use std::path::{Path, PathBuf};

/// Errors of the file-facing layer.
#[derive(Debug, thiserror::Error)]
pub enum AppError {
    /// Bad configuration or command line.
    #[error("{0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
    /// A checkpoint that does not fit the requested model.
    #[error("checkpoint does not match the configuration:\n{0}")]
    Mismatch(String),
    #[error(transparent)]
    Core(#[from] crackclf_core::Error),
}

impl AppError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        AppError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn format(path: &Path, message: impl std::fmt::Display) -> Self {
        AppError::Format {
            path: path.to_path_buf(),
            message: message.to_string(),
        }
    }

    /// Process exit status: 2 for configuration problems, 1 otherwise.
    pub fn exit_code(&self) -> u8 {
        match self {
            AppError::Config(_) | AppError::Mismatch(_) => 2,
            AppError::Core(crackclf_core::Error::InvalidConfig(_)) => 2,
            _ => 1,
        }
    }
}

pub type AppResult<T> = std::result::Result<T, AppError>;
