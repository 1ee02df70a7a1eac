//! Stable Diffusion backends (`sd15`, `sdxl`): VAE latents, a noised
//! U-Net pass, and IP-Adapter Plus image tokens for cross-attention.

pub mod config;
pub mod ip_adapter;
pub mod unet;
pub mod vae;

use std::path::{Path, PathBuf};
use std::sync::Arc;

use diffsim_core::{AttentionKind, AttentionSite, IPTokenSet, ProjectedLatents, TOTAL_TIMESTEPS};
use ndarray::{Array1, Array2, Array3};

use crate::backend::{Backend, WeightsStatus, DEFAULT_TIMESTEP};
use crate::error::{Error, Result};
use crate::image::{prepare, prepare_shortest_side, to_tensor, SourceImage};
use crate::lazy::LazyModel;
use crate::nn::{self, Weights};
use crate::schedule::NoiseSchedule;
use crate::vit::{Flavor, VitConfig, VitModel, VitOutput, CLIP_MEAN, CLIP_STD};

pub use config::{SchedulerConfig, UNetConfig, VaeConfig};
pub use ip_adapter::Resampler;
pub use unet::{attention_blocks, resolve, Conditioning, Flow, UNet};
pub use vae::VaeEncoder;

/// Image-encoder input size for IP-Adapter.
pub const IMAGE_ENCODER_RESOLUTION: u32 = 224;

/// Weight of the image-token attention added to text cross-attention.
pub const IP_SCALE: f32 = 1.0;

/// Files below `<weights dir>/<backend id>/`.
const UNET_WEIGHTS: &str = "unet/diffusion_pytorch_model.safetensors";
const UNET_CONFIG: &str = "unet/config.json";
const VAE_WEIGHTS: &str = "vae/diffusion_pytorch_model.safetensors";
const VAE_CONFIG: &str = "vae/config.json";
const SCHEDULER_CONFIG: &str = "scheduler/scheduler_config.json";
const PROMPT: &str = "empty_prompt.safetensors";
const IP_ADAPTER: &str = "ip_adapter.safetensors";
const ENCODER_WEIGHTS: &str = "image_encoder/model.safetensors";
const ENCODER_CONFIG: &str = "image_encoder/config.json";

/// Text conditioning for the empty prompt.
struct Prompt {
    context: Array2<f32>,
    pooled: Option<Array1<f32>>,
}

struct ImageProjector {
    encoder: VitModel,
    resampler: Resampler,
}

pub struct StableDiffusion {
    id: &'static str,
    xl: bool,
    dir: Option<PathBuf>,
    unet_config: UNetConfig,
    vae_scaling: f32,
    schedule: NoiseSchedule,
    unet: LazyModel<UNet>,
    vae: LazyModel<VaeEncoder>,
    prompt: LazyModel<Prompt>,
    projector: LazyModel<ImageProjector>,
}

fn config_or<T>(path: Option<PathBuf>, load: impl Fn(&Path) -> Result<T>, default: T) -> T {
    path.filter(|p| p.is_file()).and_then(|p| load(&p).ok()).unwrap_or(default)
}

impl StableDiffusion {
    pub fn sd15(weights_dir: Option<PathBuf>) -> Self {
        Self::new("sd15", false, weights_dir, UNetConfig::sd15(), 0.18215)
    }

    pub fn sdxl(weights_dir: Option<PathBuf>) -> Self {
        Self::new("sdxl", true, weights_dir, UNetConfig::sdxl(), 0.13025)
    }

    fn new(id: &'static str, xl: bool, weights_dir: Option<PathBuf>, unet: UNetConfig, scaling: f32) -> Self {
        let dir = weights_dir.map(|d| d.join(id));
        let file = |name: &str| dir.as_ref().map(|d| d.join(name));
        let unet_config = config_or(file(UNET_CONFIG), UNetConfig::load, unet);
        let vae_scaling = config_or(file(VAE_CONFIG), VaeConfig::load, VaeConfig::with_scaling(scaling)).scaling_factor;
        let schedule = config_or(file(SCHEDULER_CONFIG), SchedulerConfig::load, SchedulerConfig::default())
            .schedule()
            .unwrap_or_else(|_| NoiseSchedule::scaled_linear(0.00085, 0.012, TOTAL_TIMESTEPS as usize));
        StableDiffusion {
            id,
            xl,
            dir,
            unet_config,
            vae_scaling,
            schedule,
            unet: LazyModel::new(),
            vae: LazyModel::new(),
            prompt: LazyModel::new(),
            projector: LazyModel::new(),
        }
    }

    fn path(&self, name: &str) -> PathBuf {
        match &self.dir {
            Some(d) => d.join(name),
            None => PathBuf::from(format!("$DIFFSIM_WEIGHTS_DIR/{}/{name}", self.id)),
        }
    }

    fn require(&self, name: &str) -> Result<PathBuf> {
        let p = self.path(name);
        if self.dir.is_some() && p.is_file() {
            Ok(p)
        } else {
            Err(Error::WeightsMissing { backend: self.id.into(), expected: p })
        }
    }

    fn unet(&self) -> Result<Arc<UNet>> {
        self.unet.get_or_try_init(|| {
            let weights = self.require(UNET_WEIGHTS)?;
            let ip = self.path(IP_ADAPTER);
            let ip = if ip.is_file() { Some(Weights::open(&ip)?.pp("ip_adapter")) } else { None };
            log::info!("loading {} U-Net from {}", self.id, weights.display());
            UNet::load(&Weights::open(&weights)?, self.unet_config.clone(), ip)
        })
    }

    fn vae(&self) -> Result<Arc<VaeEncoder>> {
        self.vae.get_or_try_init(|| {
            let weights = self.require(VAE_WEIGHTS)?;
            let config = self.path(VAE_CONFIG);
            let config = if config.is_file() { VaeConfig::load(&config)? } else { VaeConfig::with_scaling(self.vae_scaling) };
            VaeEncoder::load(&Weights::open(&weights)?, &config)
        })
    }

    fn prompt(&self) -> Result<Arc<Prompt>> {
        self.prompt.get_or_try_init(|| {
            let w = Weights::open(self.require(PROMPT)?)?;
            let context = w.get("context")?;
            let dim = *context.shape().last().unwrap_or(&0);
            let rows = context.len() / dim.max(1);
            let context = context
                .into_shape_with_order((rows, dim))
                .map_err(|_| w.malformed("context shape"))?;
            if dim != self.unet_config.cross_attention_dim {
                return Err(w.malformed(&format!(
                    "context width {dim} does not match the U-Net cross-attention width {}",
                    self.unet_config.cross_attention_dim
                )));
            }
            let pooled = if self.xl {
                let p = w.get("pooled")?;
                let n = p.len();
                Some(p.into_shape_with_order(n).map_err(|_| w.malformed("pooled shape"))?)
            } else {
                None
            };
            Ok(Prompt { context, pooled })
        })
    }

    fn projector(&self) -> Result<Arc<ImageProjector>> {
        self.projector.get_or_try_init(|| {
            let weights = self.require(ENCODER_WEIGHTS)?;
            let config_path = self.require(ENCODER_CONFIG)?;
            let adapter = Weights::open(self.require(IP_ADAPTER)?)?;
            let encoder = VitModel::load(&Weights::open(&weights)?, VitConfig::load(&config_path)?, Flavor::Clip)?;
            let resampler = Resampler::load(&adapter.pp("image_proj"))?;
            Ok(ImageProjector { encoder, resampler })
        })
    }

    /// U-Net timestep input; `T` itself maps to the last trained step.
    fn unet_timestep(t: u32) -> f32 {
        t.min(TOTAL_TIMESTEPS - 1) as f32
    }
}

impl Backend for StableDiffusion {
    fn id(&self) -> &str {
        self.id
    }

    fn is_diffusion(&self) -> bool {
        true
    }

    fn sites(&self) -> Vec<AttentionSite> {
        let mut out = Vec::new();
        for (block, _, attentions, depth) in attention_blocks(&self.unet_config) {
            for ordinal in 0..(attentions * depth) as u32 {
                for kind in [AttentionKind::SelfAttn, AttentionKind::Cross] {
                    out.push(AttentionSite::new(self.id, kind, block, ordinal).with_timestep(Some(DEFAULT_TIMESTEP)));
                }
            }
        }
        out.sort();
        out
    }

    fn encode(&self, image: &SourceImage, resolution: u32, crop: bool) -> Result<Array3<f32>> {
        self.check_resolution(resolution)?;
        let pixels = to_tensor(&prepare(image, resolution, crop), [0.5; 3], [0.5; 3]);
        self.vae()?.encode(&pixels)
    }

    fn schedule(&self) -> Option<&NoiseSchedule> {
        Some(&self.schedule)
    }

    fn image_tokens(&self, image: &SourceImage, crop: bool) -> Result<IPTokenSet> {
        let p = self.projector()?;
        let res = IMAGE_ENCODER_RESOLUTION;
        let pixels = to_tensor(&prepare_shortest_side(image, res, res, crop), CLIP_MEAN, CLIP_STD);
        // penultimate hidden states
        let stop = p.encoder.config().num_hidden_layers - 1;
        let VitOutput::Hidden(features) = p.encoder.forward(&pixels, None, stop)? else {
            unreachable!("no capture requested")
        };
        Ok(IPTokenSet::new(p.resampler.forward(&features)?, image.hash())?)
    }

    fn has_image_tokens(&self) -> bool {
        true
    }

    fn project(
        &self,
        input: &Array3<f32>,
        tokens: Option<&IPTokenSet>,
        site: &AttentionSite,
        source_id: &str,
    ) -> Result<ProjectedLatents> {
        self.validate_site(site)?;
        let target = resolve(&self.unet_config, site.block, site.layer_ordinal, site.kind)
            .ok_or_else(|| Error::SiteNotFound { backend: self.id.into(), site: site.canonical() })?;
        let cross = site.kind == AttentionKind::Cross;
        if cross && tokens.is_none() {
            return Err(Error::InvalidConfig(format!("cross-attention site {site} needs image tokens")));
        }
        let unet = self.unet()?;
        if cross && !unet.has_ip_adapter() {
            return Err(Error::WeightsMissing { backend: self.id.into(), expected: self.path(IP_ADAPTER) });
        }
        let prompt = self.prompt()?;
        let res = site.resolution as f32;
        let cond = Conditioning {
            context: &prompt.context,
            ip_tokens: tokens.map(|t| &t.tokens),
            ip_scale: IP_SCALE,
            added: prompt.pooled.as_ref().map(|p| (p, [res, res, 0.0, 0.0, res, res])),
        };
        let t = Self::unet_timestep(site.timestep.unwrap_or(DEFAULT_TIMESTEP));
        match unet.forward(input, t, &cond, Some(target))? {
            Flow::Hit(c) => Ok(ProjectedLatents::new(
                nn::split_heads(c.q.view(), c.heads)?,
                nn::split_heads(c.k.view(), c.heads)?,
                nn::split_heads(c.v.view(), c.heads)?,
                site.clone(),
                source_id,
            )?),
            Flow::Go(_) => Err(Error::Shape(format!("site {site} was not reached"))),
        }
    }

    fn weights_status(&self) -> WeightsStatus {
        let files: Vec<PathBuf> = [UNET_WEIGHTS, VAE_WEIGHTS, PROMPT, IP_ADAPTER, ENCODER_WEIGHTS, ENCODER_CONFIG]
            .iter()
            .map(|f| self.path(f))
            .collect();
        let missing = files.iter().filter(|p| self.dir.is_none() || !p.is_file()).cloned().collect();
        WeightsStatus {
            backend_id: self.id.into(),
            expected: Some(self.dir.clone().unwrap_or_else(|| self.path(""))),
            files,
            missing,
        }
    }
}
