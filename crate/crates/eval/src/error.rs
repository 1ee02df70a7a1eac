use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}: not a valid manifest: {reason}", path.display())]
    Parse { path: PathBuf, reason: String },

    #[error("manifest field `{field}`: {reason}")]
    Schema { field: String, reason: String },

    #[error("duplicate image id `{0}`")]
    DuplicateId(String),

    #[error("image `{id}` points to missing file {}", path.display())]
    DanglingPath { id: String, path: PathBuf },

    #[error("{benchmark}: not enough items to sample: {reason}")]
    Insufficient { benchmark: String, reason: String },

    #[error("unknown video `{0}`")]
    UnknownVideo(String),

    #[error("video `{video}`: {reason}")]
    Frames { video: String, reason: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("unknown image id `{0}`")]
    UnknownImage(String),

    #[error("triplet `{id}`: {source}")]
    Triplet {
        id: String,
        #[source]
        source: Box<Error>,
    },

    #[error("image `{id}`: {source}")]
    Item {
        id: String,
        #[source]
        source: Box<Error>,
    },

    #[error("cannot render {}: {reason}", path.display())]
    Render { path: PathBuf, reason: String },

    #[error(transparent)]
    Backend(#[from] diffsim_backends::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn schema(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Schema { field: field.into(), reason: reason.into() }
    }

    pub(crate) fn in_triplet(self, id: &str) -> Self {
        Error::Triplet { id: id.to_string(), source: Box::new(self) }
    }

    pub(crate) fn in_item(self, id: &str) -> Self {
        Error::Item { id: id.to_string(), source: Box::new(self) }
    }

    /// True for errors caused by bad input (manifests, configs, flags)
    /// rather than by the runtime.
    pub fn is_validation(&self) -> bool {
        match self {
            Error::Parse { .. }
            | Error::Schema { .. }
            | Error::DuplicateId(_)
            | Error::DanglingPath { .. }
            | Error::Insufficient { .. }
            | Error::UnknownVideo(_)
            | Error::Frames { .. }
            | Error::Config(_)
            | Error::UnknownImage(_) => true,
            Error::Triplet { source, .. } | Error::Item { source, .. } => source.is_validation(),
            Error::Backend(e) => e.is_validation(),
            Error::Io { .. } | Error::Render { .. } => false,
        }
    }
}
