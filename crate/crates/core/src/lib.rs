//! Backend-independent core of the DiffSim metric.
//!
//! Given the per-head query/key/value projections of two images at the same
//! attention site, the aligned attention score (AAS) compares the output an
//! image's queries produce against its own keys/values with the output the
//! same queries produce against the other image's keys/values. The
//! bidirectional average of the two directions is the similarity score.
//!
//! Everything here is a pure function of its inputs.

pub mod attention;
pub mod config;
mod error;
pub mod latents;
pub mod score;
pub mod site;

pub use attention::{attention_weights, multihead_align, scaled_dot_attention};
pub use config::{CosineMode, MetricConfig, MetricKind};
pub use error::{Error, Result};
pub use latents::{AlignedFeatures, IPTokenSet, ProjectedLatents};
pub use score::{
    aas, aas_with_mode, cosine, cross_aas_pair, cross_aas_pair_with_mode, flattened_cosine,
    similarity, similarity_with_mode, token_cosine, SimilarityScore,
};
pub use site::{AttentionKind, AttentionSite, Block, TOTAL_TIMESTEPS};
