//! encode → noise → extract → score, with the feature store consulted
//! before every extraction and written after.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use diffsim_core::{
    cross_aas_pair_with_mode, similarity_with_mode, AttentionKind, AttentionSite, IPTokenSet, MetricConfig,
    ProjectedLatents, SimilarityScore,
};
use diffsim_store::{CacheKey, FeatureStore};
use ndarray::Array3;
use rayon::prelude::*;

use crate::backend::Backend;
use crate::error::{Error, Result};
use crate::image::SourceImage;
use crate::registry::Registry;
use crate::schedule::{forward_noise, sample_noise};

/// How a latent is noised before extraction.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NoiseMode {
    /// One ε per (seed, timestep), shared by all images.
    Shared,
    /// ε additionally keyed by the image hash.
    PerImage,
    /// Non-diffusion backends.
    None,
}

impl NoiseMode {
    pub fn for_config(config: &MetricConfig, backend: &dyn Backend) -> Self {
        match (backend.is_diffusion(), config.shared_noise) {
            (false, _) => NoiseMode::None,
            (true, true) => NoiseMode::Shared,
            (true, false) => NoiseMode::PerImage,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            NoiseMode::Shared => "shared",
            NoiseMode::PerImage => "per_image",
            NoiseMode::None => "none",
        }
    }
}

/// Noises an encoded latent at `timestep`; identity for `NoiseMode::None`.
pub fn noised_input(
    backend: &dyn Backend,
    latent: &Array3<f32>,
    timestep: Option<u32>,
    seed: u64,
    mode: NoiseMode,
    image_hash: &str,
) -> Result<Array3<f32>> {
    let (Some(schedule), Some(t)) = (backend.schedule(), timestep) else {
        return Ok(latent.clone());
    };
    let hash = match mode {
        NoiseMode::None => return Ok(latent.clone()),
        NoiseMode::Shared => None,
        NoiseMode::PerImage => Some(image_hash),
    };
    let eps = sample_noise(latent.raw_dim(), seed, t, hash);
    forward_noise(latent, t, &eps, schedule)
}

/// Cache key of the projections of `image` under `config`.
pub fn latents_key(config: &MetricConfig, image_hash: &str, mode: NoiseMode) -> CacheKey {
    let seed = if mode == NoiseMode::None { 0 } else { config.noise_seed };
    CacheKey {
        image_hash: image_hash.to_string(),
        backend_id: config.site.backend_id.clone(),
        site: config.site.canonical(),
        noise_seed: seed,
        resolution: config.site.resolution,
        variant: format!("noise={};crop={}", mode.as_str(), u8::from(config.crop_subject)),
    }
}

/// Cache key of the image tokens of `image`.
pub fn tokens_key(backend_id: &str, image_hash: &str, crop: bool) -> CacheKey {
    CacheKey {
        image_hash: image_hash.to_string(),
        backend_id: backend_id.to_string(),
        site: CacheKey::IP_TOKENS_SITE.to_string(),
        noise_seed: 0,
        resolution: 0,
        variant: format!("crop={}", u8::from(crop)),
    }
}

/// Extraction and scoring front end, optionally backed by a feature store.
///
/// Parallel helpers compute per-image work concurrently but every score is
/// assembled from its two operands in argument order, so results do not
/// depend on scheduling.
#[derive(Clone, Debug)]
pub struct Scorer {
    registry: Registry,
    store: Option<FeatureStore>,
    stats: Arc<Stats>,
}

#[derive(Debug, Default)]
struct Stats {
    extractions: AtomicU64,
    hits: AtomicU64,
}

impl Scorer {
    pub fn new(registry: Registry) -> Self {
        Scorer { registry, store: None, stats: Arc::default() }
    }

    pub fn with_store(mut self, store: FeatureStore) -> Self {
        self.store = Some(store);
        self
    }

    pub fn registry(&self) -> &Registry {
        &self.registry
    }

    pub fn store(&self) -> Option<&FeatureStore> {
        self.store.as_ref()
    }

    /// Forward passes run so far (projections and image tokens).
    pub fn extractions(&self) -> u64 {
        self.stats.extractions.load(Ordering::Relaxed)
    }

    pub fn cache_hits(&self) -> u64 {
        self.stats.hits.load(Ordering::Relaxed)
    }

    /// Checks the config against the backend it names.
    pub fn validate(&self, config: &MetricConfig) -> Result<&Arc<dyn Backend>> {
        config.validate()?;
        let backend = self.registry.get(&config.site.backend_id)?;
        backend.validate_site(&config.site)?;
        Ok(backend)
    }

    pub fn image_tokens(&self, backend: &dyn Backend, image: &SourceImage, crop: bool) -> Result<IPTokenSet> {
        let key = tokens_key(backend.id(), image.hash(), crop);
        if let Some(store) = &self.store {
            if let Some(t) = store.get_tokens(&key)? {
                self.stats.hits.fetch_add(1, Ordering::Relaxed);
                return Ok(t);
            }
        }
        let tokens = backend.image_tokens(image, crop)?;
        self.stats.extractions.fetch_add(1, Ordering::Relaxed);
        if let Some(store) = &self.store {
            store.put_tokens(&key, &tokens)?;
        }
        Ok(tokens)
    }

    /// Projections of one image at the configured site.
    pub fn latents(&self, config: &MetricConfig, image: &SourceImage) -> Result<ProjectedLatents> {
        let backend = self.validate(config)?;
        let mode = NoiseMode::for_config(config, backend.as_ref());
        let key = latents_key(config, image.hash(), mode);
        if let Some(store) = &self.store {
            if let Some(l) = store.get(&key)? {
                self.stats.hits.fetch_add(1, Ordering::Relaxed);
                return Ok(l);
            }
        }
        let latents = self.extract(backend.as_ref(), config, image, mode)?;
        if let Some(store) = &self.store {
            store.put(&key, &latents)?;
        }
        Ok(latents)
    }

    fn extract(
        &self,
        backend: &dyn Backend,
        config: &MetricConfig,
        image: &SourceImage,
        mode: NoiseMode,
    ) -> Result<ProjectedLatents> {
        let site = &config.site;
        let tokens = match site.kind {
            AttentionKind::Cross => Some(self.image_tokens(backend, image, config.crop_subject)?),
            AttentionKind::SelfAttn => None,
        };
        let latent = backend.encode(image, site.resolution, config.crop_subject)?;
        let input = noised_input(backend, &latent, site.timestep, config.noise_seed, mode, image.hash())?;
        let out = backend.project(&input, tokens.as_ref(), site, image.hash())?;
        self.stats.extractions.fetch_add(1, Ordering::Relaxed);
        Ok(out)
    }

    /// Similarity of two images under `config`.
    pub fn score(&self, config: &MetricConfig, a: &SourceImage, b: &SourceImage) -> Result<SimilarityScore> {
        let la = self.latents(config, a)?;
        let lb = self.latents(config, b)?;
        score_latents(config, &la, &lb)
    }

    /// Projections for many images, in input order.
    pub fn latents_many(&self, config: &MetricConfig, images: &[SourceImage]) -> Result<Vec<ProjectedLatents>> {
        images.par_iter().map(|img| self.latents(config, img)).collect()
    }
}

/// Self path: `similarity`; cross path: each operand carries its own
/// image-token keys and values.
pub fn score_latents(config: &MetricConfig, a: &ProjectedLatents, b: &ProjectedLatents) -> Result<SimilarityScore> {
    let score = match config.site.kind {
        AttentionKind::SelfAttn => similarity_with_mode(a, b, config.cosine_mode)?,
        AttentionKind::Cross => cross_aas_pair_with_mode(a, a, b, b, config.cosine_mode)?,
    };
    Ok(score.with_config(config.clone()))
}

pub fn list_sites(backend_id: &str) -> Result<Vec<AttentionSite>> {
    Ok(Registry::global().get(backend_id)?.sites())
}

pub fn encode_image(backend_id: &str, image: &SourceImage, resolution: u32) -> Result<Array3<f32>> {
    Registry::global().get(backend_id)?.encode(image, resolution, false)
}

/// Projections with shared noise and no subject crop.
pub fn extract_projected_latents(
    backend_id: &str,
    image: &SourceImage,
    site: &AttentionSite,
    noise_seed: u64,
) -> Result<ProjectedLatents> {
    let backend = Registry::global().get(backend_id)?;
    if site.backend_id != backend_id {
        return Err(Error::InvalidConfig(format!("site {site} is not a `{backend_id}` site")));
    }
    let kind = diffsim_core::MetricKind::for_backend(backend_id)
        .filter(|k| k.attention_kind() == site.kind)
        .unwrap_or(match site.kind {
            AttentionKind::Cross => diffsim_core::MetricKind::DiffsimC,
            AttentionKind::SelfAttn => diffsim_core::MetricKind::DiffsimS,
        });
    let mut config = MetricConfig::new(site.clone(), kind);
    config.noise_seed = noise_seed;
    backend.validate_site(site)?;
    let mode = NoiseMode::for_config(&config, backend.as_ref());
    Scorer::new(Registry::global().clone()).extract(backend.as_ref(), &config, image, mode)
}

pub fn extract_ip_tokens(backend_id: &str, image: &SourceImage) -> Result<IPTokenSet> {
    Registry::global().get(backend_id)?.image_tokens(image, false)
}

/// Uncached pair score through the process-wide registry.
pub fn compute_pair_score(config: &MetricConfig, a: &SourceImage, b: &SourceImage) -> Result<SimilarityScore> {
    Scorer::new(Registry::global().clone()).score(config, a, b)
}
