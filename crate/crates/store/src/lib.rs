//! Content-addressed persistent cache of attention projections and image
//! tokens, plus the safetensors container used for both the cache payloads
//! and model checkpoints.

mod error;
mod key;
pub mod safetensors;
mod store;

pub use error::{Error, Result};
pub use key::CacheKey;
pub use store::{EntryKind, FeatureStore, GcReport, Sidecar, CACHE_DIR_ENV};
