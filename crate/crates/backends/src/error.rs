use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("unknown backend `{0}`")]
    UnknownBackend(String),

    #[error("site {site} is not published by backend `{backend}`")]
    SiteNotFound { backend: String, site: String },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("backend `{backend}` does not support resolution {resolution} (supported: {supported:?})")]
    UnsupportedResolution {
        backend: String,
        resolution: u32,
        supported: Vec<u32>,
    },

    #[error("cannot read image {}: {reason}", path.as_ref().map(|p| p.display().to_string()).unwrap_or_else(|| "<memory>".into()))]
    Image { path: Option<PathBuf>, reason: String },

    #[error("weights for backend `{backend}` not found; expected {}", expected.display())]
    WeightsMissing { backend: String, expected: PathBuf },

    #[error("malformed weights {}: {reason}", path.display())]
    Weights { path: PathBuf, reason: String },

    #[error("backend `{0}` has no image-token projector")]
    NoImageTokens(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("cache entry {key} is corrupt: {reason}")]
    CacheCorrupt { key: String, reason: String },

    #[error(transparent)]
    Store(diffsim_store::Error),

    #[error(transparent)]
    Core(#[from] diffsim_core::Error),
}

impl From<diffsim_store::Error> for Error {
    fn from(e: diffsim_store::Error) -> Self {
        match e {
            diffsim_store::Error::Integrity { key, reason, path } => Error::CacheCorrupt {
                key,
                reason: format!("{reason} ({})", path.display()),
            },
            other => Error::Store(other),
        }
    }
}

impl Error {
    /// True for errors caused by bad user input rather than the runtime.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::UnknownBackend(_)
                | Error::SiteNotFound { .. }
                | Error::InvalidConfig(_)
                | Error::UnsupportedResolution { .. }
                | Error::NoImageTokens(_)
        ) || matches!(self, Error::Core(diffsim_core::Error::Invalid(_)))
    }
}
