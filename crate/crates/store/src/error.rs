use std::path::{Path, PathBuf};

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: malformed tensor container: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("{path}: no tensor named `{name}`")]
    MissingTensor { path: PathBuf, name: String },

    #[error("cache entry {key} failed its integrity check ({path}): {reason}")]
    Integrity { key: String, path: PathBuf, reason: String },

    #[error(transparent)]
    Core(#[from] diffsim_core::Error),
}

impl Error {
    pub(crate) fn io(path: impl AsRef<Path>, source: std::io::Error) -> Self {
        Error::Io { path: path.as_ref().to_path_buf(), source }
    }
}
