//! Feature extraction backends and pair scoring for the Aligned Attention
//! Score family of metrics.
//!
//! A [`Backend`] turns an image into the query/key/value projections of
//! one attention layer. The [`Registry`] holds every backend by id, and
//! the [`Scorer`] adds noising, caching and scoring on top.

pub mod backend;
pub mod error;
pub mod image;
pub mod lazy;
pub mod nn;
pub mod pipeline;
pub mod registry;
pub mod schedule;
pub mod sd;
pub mod toy;
pub mod vit;

pub use backend::{Backend, WeightsStatus, DEFAULT_TIMESTEP, STANDARD_RESOLUTIONS};
pub use error::{Error, Result};
pub use image::SourceImage;
pub use pipeline::{
    compute_pair_score, encode_image, extract_ip_tokens, extract_projected_latents, list_sites, score_latents,
    NoiseMode, Scorer,
};
pub use registry::{Registry, BACKEND_IDS, WEIGHTS_DIR_ENV};
pub use schedule::{forward_noise, sample_noise, NoiseSchedule};
pub use sd::StableDiffusion;
pub use toy::ToyBackend;
pub use vit::VisionTransformer;
