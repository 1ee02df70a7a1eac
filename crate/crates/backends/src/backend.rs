use std::path::PathBuf;

use diffsim_core::{AttentionSite, IPTokenSet, ProjectedLatents};
use ndarray::Array3;

use crate::error::{Error, Result};
use crate::image::SourceImage;
use crate::schedule::NoiseSchedule;

/// Input resolutions accepted by the standard backends.
pub const STANDARD_RESOLUTIONS: [u32; 4] = [384, 512, 768, 1024];

/// Default timestep attached to diffusion sites by `list_sites`.
pub const DEFAULT_TIMESTEP: u32 = 500;

/// Where a backend expects its checkpoints and whether they are present.
#[derive(Clone, Debug, PartialEq, Eq, serde::Serialize)]
pub struct WeightsStatus {
    pub backend_id: String,
    /// `None` for backends without external weights.
    pub expected: Option<PathBuf>,
    /// Every file the backend reads.
    pub files: Vec<PathBuf>,
    pub missing: Vec<PathBuf>,
}

impl WeightsStatus {
    pub fn builtin(backend_id: &str) -> Self {
        WeightsStatus { backend_id: backend_id.into(), expected: None, files: Vec::new(), missing: Vec::new() }
    }

    pub fn is_ready(&self) -> bool {
        self.missing.is_empty()
    }
}

/// A feature extractor. One forward pass per call; implementations must
/// be deterministic and safe to share across threads.
pub trait Backend: Send + Sync {
    fn id(&self) -> &str;

    /// Diffusion backends noise their latent and take a timestep.
    fn is_diffusion(&self) -> bool;

    /// Published sites, sorted, with the default timestep and resolution.
    fn sites(&self) -> Vec<AttentionSite>;

    fn supported_resolutions(&self) -> &[u32] {
        &STANDARD_RESOLUTIONS
    }

    fn default_resolution(&self) -> u32 {
        512
    }

    /// Preprocesses and encodes an image into the tensor the network
    /// consumes: a VAE latent, a normalized pixel tensor, or the toy canvas.
    fn encode(&self, image: &SourceImage, resolution: u32, crop: bool) -> Result<Array3<f32>>;

    fn schedule(&self) -> Option<&NoiseSchedule> {
        None
    }

    /// Image tokens for cross-attention conditioning.
    fn image_tokens(&self, _image: &SourceImage, _crop: bool) -> Result<IPTokenSet> {
        Err(Error::NoImageTokens(self.id().to_string()))
    }

    fn has_image_tokens(&self) -> bool {
        false
    }

    /// Runs the network on an encoded (and, for diffusion, noised) input
    /// and captures the projections at `site`. Cross sites need `tokens`.
    fn project(
        &self,
        input: &Array3<f32>,
        tokens: Option<&IPTokenSet>,
        site: &AttentionSite,
        source_id: &str,
    ) -> Result<ProjectedLatents>;

    fn weights_status(&self) -> WeightsStatus {
        WeightsStatus::builtin(self.id())
    }

    /// Checks that `site` addresses a published layer and that its
    /// timestep and resolution fit this backend.
    fn validate_site(&self, site: &AttentionSite) -> Result<()> {
        site.check()?;
        if site.backend_id != self.id() {
            return Err(Error::InvalidConfig(format!(
                "site {site} belongs to backend `{}`, not `{}`",
                site.backend_id,
                self.id()
            )));
        }
        if !self.sites().iter().any(|s| s.same_layer(site)) {
            return Err(Error::SiteNotFound { backend: self.id().into(), site: site.canonical() });
        }
        match (self.is_diffusion(), site.timestep) {
            (true, None) => {
                return Err(Error::InvalidConfig(format!(
                    "backend `{}` is a diffusion backend and needs a timestep",
                    self.id()
                )))
            }
            (false, Some(_)) => {
                return Err(Error::InvalidConfig(format!(
                    "backend `{}` takes no timestep",
                    self.id()
                )))
            }
            _ => {}
        }
        self.check_resolution(site.resolution)
    }

    fn check_resolution(&self, resolution: u32) -> Result<()> {
        if self.supported_resolutions().contains(&resolution) {
            Ok(())
        } else {
            Err(Error::UnsupportedResolution {
                backend: self.id().into(),
                resolution,
                supported: self.supported_resolutions().to_vec(),
            })
        }
    }
}
