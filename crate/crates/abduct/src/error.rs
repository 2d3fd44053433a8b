use std::path::{Path, PathBuf};

pub type Result<T, E = IoError> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Bare(#[from] std::io::Error),
    #[error("format error: {0}")]
    Format(String),
    #[error("{path}: {message}")]
    Document { path: PathBuf, message: String },
    #[error(transparent)]
    Core(#[from] abductive_core::Error),
    #[error("config: {0}")]
    Config(String),
}

impl IoError {
    pub fn at(path: &Path, source: std::io::Error) -> Self {
        IoError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn doc(path: &Path, message: impl Into<String>) -> Self {
        IoError::Document {
            path: path.to_path_buf(),
            message: message.into(),
        }
    }

    /// Attaches `path` to errors that do not carry one yet.
    pub fn context(self, path: &Path) -> Self {
        match self {
            IoError::Bare(source) => IoError::at(path, source),
            IoError::Format(m) => IoError::doc(path, m),
            other => other,
        }
    }
}
