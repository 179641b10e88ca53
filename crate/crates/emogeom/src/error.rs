use std::fmt::Display;
use std::path::{Path, PathBuf};

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] emogeom_core::Error),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}: {message}", path.display())]
    Parse { path: PathBuf, message: String },

    #[error("{0}")]
    Validation(String),

    #[error("model: {0}")]
    Model(String),

    #[error("unsupported: {0}")]
    Capability(String),

    #[error("capture failed for {model_id} at layer {layer}: {reason}")]
    Capture {
        model_id: String,
        layer: usize,
        reason: String,
    },

    #[error("run directory {} is locked by another writer", .0.display())]
    Locked(PathBuf),

    #[error("{0}")]
    Render(String),
}

impl Error {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn parse(path: &Path, message: impl Display) -> Self {
        Self::Parse {
            path: path.to_path_buf(),
            message: message.to_string(),
        }
    }
}
