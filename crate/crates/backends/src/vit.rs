//! CLIP and DINOv2 vision transformers in the Hugging Face checkpoint
//! layout, with projections captured from any encoder layer.

use std::path::{Path, PathBuf};

use diffsim_core::{AttentionKind, AttentionSite, Block, ProjectedLatents};
use ndarray::{concatenate, s, Array1, Array2, Array3, Axis};
use serde::Deserialize;

use crate::backend::{Backend, WeightsStatus};
use crate::error::{Error, Result};
use crate::image::{prepare_shortest_side, to_tensor, SourceImage};
use crate::lazy::LazyModel;
use crate::nn::{self, resize_bicubic, Activation, BicubicMode, Conv2d, LayerNorm, Linear, Weights};

pub const CLIP_MEAN: [f32; 3] = [0.481_454_66, 0.457_827_5, 0.408_210_73];
pub const CLIP_STD: [f32; 3] = [0.268_629_54, 0.261_302_58, 0.275_777_1];
pub const IMAGENET_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f32; 3] = [0.229, 0.224, 0.225];

/// Resolutions accepted by the transformer backends: their native 224
/// plus the standard sweep, via position-embedding interpolation.
pub const VIT_RESOLUTIONS: [u32; 5] = [224, 384, 512, 768, 1024];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Flavor {
    Clip,
    Dino,
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
pub struct VitConfig {
    pub hidden_size: usize,
    pub num_attention_heads: usize,
    pub num_hidden_layers: usize,
    pub patch_size: usize,
    pub image_size: usize,
    #[serde(default = "default_eps")]
    pub layer_norm_eps: f32,
    #[serde(default = "default_act")]
    pub hidden_act: String,
    #[serde(default)]
    pub use_swiglu_ffn: bool,
}

fn default_eps() -> f32 {
    1e-5
}

fn default_act() -> String {
    "gelu".into()
}

impl VitConfig {
    /// openai/clip-vit-large-patch14
    pub fn clip_large() -> Self {
        VitConfig {
            hidden_size: 1024,
            num_attention_heads: 16,
            num_hidden_layers: 24,
            patch_size: 14,
            image_size: 224,
            layer_norm_eps: 1e-5,
            hidden_act: "quick_gelu".into(),
            use_swiglu_ffn: false,
        }
    }

    /// facebook/dinov2-base
    pub fn dinov2_base() -> Self {
        VitConfig {
            hidden_size: 768,
            num_attention_heads: 12,
            num_hidden_layers: 12,
            patch_size: 14,
            image_size: 518,
            layer_norm_eps: 1e-6,
            hidden_act: "gelu".into(),
            use_swiglu_ffn: false,
        }
    }

    /// Reads `config.json`; CLIP files may nest the vision tower under
    /// `vision_config`.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Weights { path: path.into(), reason: e.to_string() })?;
        let mut value: serde_json::Value = serde_json::from_str(&text)
            .map_err(|e| Error::Weights { path: path.into(), reason: e.to_string() })?;
        if let Some(v) = value.get_mut("vision_config") {
            value = v.take();
        }
        serde_json::from_value(value).map_err(|e| Error::Weights { path: path.into(), reason: e.to_string() })
    }
}

enum Mlp {
    Plain { fc1: Linear, fc2: Linear, act: Activation },
    SwiGlu { w_in: Linear, w_out: Linear },
}

impl Mlp {
    fn forward(&self, x: &Array2<f32>) -> Array2<f32> {
        match self {
            Mlp::Plain { fc1, fc2, act } => {
                let h = fc1.forward(x.view()).mapv(|v| act.apply(v));
                fc2.forward(h.view())
            }
            Mlp::SwiGlu { w_in, w_out } => {
                let h = w_in.forward(x.view());
                let half = h.ncols() / 2;
                let gated = Array2::from_shape_fn((h.nrows(), half), |(i, j)| nn::silu(h[[i, j]]) * h[[i, half + j]]);
                w_out.forward(gated.view())
            }
        }
    }
}

struct VitLayer {
    norm1: LayerNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    scale1: Option<Array1<f32>>,
    norm2: LayerNorm,
    mlp: Mlp,
    scale2: Option<Array1<f32>>,
}

/// Result of a forward pass stopped at a layer.
pub enum VitOutput {
    Projections { q: Array2<f32>, k: Array2<f32>, v: Array2<f32> },
    Hidden(Array2<f32>),
}

pub struct VitModel {
    flavor: Flavor,
    config: VitConfig,
    patch: Conv2d,
    cls: Array1<f32>,
    /// `[1 + grid², width]`
    pos: Array2<f32>,
    pre_norm: Option<LayerNorm>,
    layers: Vec<VitLayer>,
}

impl VitModel {
    pub fn load(w: &Weights, config: VitConfig, flavor: Flavor) -> Result<Self> {
        let eps = config.layer_norm_eps;
        let act = Activation::parse(&config.hidden_act)
            .ok_or_else(|| w.malformed(&format!("unsupported activation `{}`", config.hidden_act)))?;
        let (patch, cls, pos, pre_norm, enc) = match flavor {
            Flavor::Clip => {
                let root = w.pp("vision_model");
                let e = root.pp("embeddings");
                (
                    Conv2d::load(&e.pp("patch_embedding"), config.patch_size, 0)?,
                    e.get1("class_embedding")?,
                    e.get2("position_embedding.weight")?,
                    Some(LayerNorm::load(&root.pp("pre_layrnorm"), eps)?),
                    root.pp("encoder").pp("layers"),
                )
            }
            Flavor::Dino => {
                let root = if w.has("dinov2.embeddings.cls_token") { w.pp("dinov2") } else { w.clone() };
                let e = root.pp("embeddings");
                let cls = e.get("cls_token")?;
                let pos = e.get("position_embeddings")?;
                let width = config.hidden_size;
                let cls = cls
                    .into_shape_with_order(width)
                    .map_err(|_| e.malformed("cls_token width"))?;
                let n = pos.len() / width;
                let pos = pos
                    .into_shape_with_order((n, width))
                    .map_err(|_| e.malformed("position_embeddings width"))?;
                (
                    Conv2d::load(&e.pp("patch_embeddings.projection"), config.patch_size, 0)?,
                    cls,
                    pos,
                    None,
                    root.pp("encoder").pp("layer"),
                )
            }
        };
        let layers = (0..config.num_hidden_layers)
            .map(|i| {
                let l = enc.pp(i);
                Ok(match flavor {
                    Flavor::Clip => VitLayer {
                        norm1: LayerNorm::load(&l.pp("layer_norm1"), eps)?,
                        q: Linear::load_auto(&l.pp("self_attn.q_proj"))?,
                        k: Linear::load_auto(&l.pp("self_attn.k_proj"))?,
                        v: Linear::load_auto(&l.pp("self_attn.v_proj"))?,
                        out: Linear::load_auto(&l.pp("self_attn.out_proj"))?,
                        scale1: None,
                        norm2: LayerNorm::load(&l.pp("layer_norm2"), eps)?,
                        mlp: Mlp::Plain {
                            fc1: Linear::load_auto(&l.pp("mlp.fc1"))?,
                            fc2: Linear::load_auto(&l.pp("mlp.fc2"))?,
                            act,
                        },
                        scale2: None,
                    },
                    Flavor::Dino => {
                        let a = l.pp("attention");
                        VitLayer {
                            norm1: LayerNorm::load(&l.pp("norm1"), eps)?,
                            q: Linear::load_auto(&a.pp("attention.query"))?,
                            k: Linear::load_auto(&a.pp("attention.key"))?,
                            v: Linear::load_auto(&a.pp("attention.value"))?,
                            out: Linear::load_auto(&a.pp("output.dense"))?,
                            scale1: Some(l.get1("layer_scale1.lambda1")?),
                            norm2: LayerNorm::load(&l.pp("norm2"), eps)?,
                            mlp: if config.use_swiglu_ffn {
                                Mlp::SwiGlu {
                                    w_in: Linear::load_auto(&l.pp("mlp.weights_in"))?,
                                    w_out: Linear::load_auto(&l.pp("mlp.weights_out"))?,
                                }
                            } else {
                                Mlp::Plain {
                                    fc1: Linear::load_auto(&l.pp("mlp.fc1"))?,
                                    fc2: Linear::load_auto(&l.pp("mlp.fc2"))?,
                                    act,
                                }
                            },
                            scale2: Some(l.get1("layer_scale2.lambda1")?),
                        }
                    }
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let grid = ((pos.nrows() - 1) as f64).sqrt().round() as usize;
        if grid * grid + 1 != pos.nrows() || pos.ncols() != config.hidden_size {
            return Err(w.malformed(&format!("position table {:?} is not a square grid", pos.dim())));
        }
        Ok(VitModel { flavor, config, patch, cls, pos, pre_norm, layers })
    }

    pub fn config(&self) -> &VitConfig {
        &self.config
    }

    pub fn flavor(&self) -> Flavor {
        self.flavor
    }

    /// Position table for a `gh × gw` patch grid, bicubic-interpolated
    /// when it differs from the trained one.
    fn positions(&self, gh: usize, gw: usize) -> Array2<f32> {
        let n = self.pos.nrows() - 1;
        let grid = (n as f64).sqrt().round() as usize;
        if gh * gw == n && gh == gw {
            return self.pos.clone();
        }
        let d = self.pos.ncols();
        let table = self.pos.slice(s![1.., ..]);
        let map = Array3::from_shape_fn((d, grid, grid), |(c, y, x)| table[[y * grid + x, c]]);
        let resized = resize_bicubic(&map, gh, gw, BicubicMode::Torch);
        let patches = nn::to_tokens(&resized);
        concatenate![Axis(0), self.pos.slice(s![0..1, ..]), patches]
    }

    /// Runs the encoder on a normalized `[3, H, W]` tensor. With
    /// `capture = Some(i)` returns layer `i`'s projections; otherwise the
    /// hidden states after the first `stop` layers.
    pub fn forward(&self, pixels: &Array3<f32>, capture: Option<usize>, stop: usize) -> Result<VitOutput> {
        let patches = self.patch.forward(pixels)?;
        let (_, gh, gw) = patches.dim();
        let tokens = nn::to_tokens(&patches);
        let mut h = concatenate![Axis(0), self.cls.view().insert_axis(Axis(0)), tokens];
        h += &self.positions(gh, gw);
        if let Some(norm) = &self.pre_norm {
            h = norm.forward(h.view());
        }
        let heads = self.config.num_attention_heads;
        for (i, layer) in self.layers.iter().enumerate() {
            if capture.is_none() && i == stop {
                break;
            }
            let n = layer.norm1.forward(h.view());
            let (q, k, v) = (layer.q.forward(n.view()), layer.k.forward(n.view()), layer.v.forward(n.view()));
            if capture == Some(i) {
                return Ok(VitOutput::Projections { q, k, v });
            }
            let mut a = layer.out.forward(nn::attention(q.view(), k.view(), v.view(), heads, None)?.view());
            if let Some(g) = &layer.scale1 {
                a *= g;
            }
            h += &a;
            let n = layer.norm2.forward(h.view());
            let mut m = layer.mlp.forward(&n);
            if let Some(g) = &layer.scale2 {
                m *= g;
            }
            h += &m;
        }
        if let Some(i) = capture {
            return Err(Error::Shape(format!("layer {i} outside 0..{}", self.layers.len())));
        }
        Ok(VitOutput::Hidden(h))
    }
}

/// `clip-vit` and `dinov2`.
pub struct VisionTransformer {
    id: &'static str,
    flavor: Flavor,
    dir: Option<PathBuf>,
    config: VitConfig,
    model: LazyModel<VitModel>,
}

impl VisionTransformer {
    pub fn clip(weights_dir: Option<PathBuf>) -> Self {
        Self::new("clip-vit", Flavor::Clip, weights_dir, VitConfig::clip_large())
    }

    pub fn dinov2(weights_dir: Option<PathBuf>) -> Self {
        Self::new("dinov2", Flavor::Dino, weights_dir, VitConfig::dinov2_base())
    }

    fn new(id: &'static str, flavor: Flavor, weights_dir: Option<PathBuf>, default: VitConfig) -> Self {
        let dir = weights_dir.map(|d| d.join(id));
        // a readable config.json decides the architecture, and thus the site list
        let config = dir
            .as_ref()
            .map(|d| d.join("config.json"))
            .filter(|p| p.is_file())
            .and_then(|p| VitConfig::load(&p).ok())
            .unwrap_or(default);
        VisionTransformer { id, flavor, dir, config, model: LazyModel::new() }
    }

    fn files(&self) -> (PathBuf, PathBuf) {
        let dir = self.dir.clone().unwrap_or_else(|| PathBuf::from(format!("$DIFFSIM_WEIGHTS_DIR/{}", self.id)));
        (dir.join("config.json"), dir.join("model.safetensors"))
    }

    fn model(&self) -> Result<std::sync::Arc<VitModel>> {
        self.model.get_or_try_init(|| {
            let (config_path, weights_path) = self.files();
            if self.dir.is_none() || !weights_path.is_file() {
                return Err(Error::WeightsMissing { backend: self.id.into(), expected: weights_path });
            }
            let config = if config_path.is_file() { VitConfig::load(&config_path)? } else { self.config.clone() };
            if config != self.config {
                return Err(Error::Weights {
                    path: config_path,
                    reason: "config changed after the backend was registered".into(),
                });
            }
            log::info!("loading {} weights from {}", self.id, weights_path.display());
            VitModel::load(&Weights::open(&weights_path)?, config, self.flavor)
        })
    }

    fn preprocess(&self, image: &SourceImage, resolution: u32, crop: bool) -> Array3<f32> {
        match self.flavor {
            Flavor::Clip => to_tensor(&prepare_shortest_side(image, resolution, resolution, crop), CLIP_MEAN, CLIP_STD),
            Flavor::Dino => {
                let short = (resolution as f64 * 256.0 / 224.0).round() as u32;
                to_tensor(&prepare_shortest_side(image, short, resolution, crop), IMAGENET_MEAN, IMAGENET_STD)
            }
        }
    }
}

impl Backend for VisionTransformer {
    fn id(&self) -> &str {
        self.id
    }

    fn is_diffusion(&self) -> bool {
        false
    }

    fn sites(&self) -> Vec<AttentionSite> {
        (0..self.config.num_hidden_layers as u32)
            .map(|i| {
                AttentionSite::new(self.id, AttentionKind::SelfAttn, Block::Layer(i), 0)
                    .with_resolution(self.default_resolution())
            })
            .collect()
    }

    fn supported_resolutions(&self) -> &[u32] {
        &VIT_RESOLUTIONS
    }

    fn default_resolution(&self) -> u32 {
        224
    }

    fn encode(&self, image: &SourceImage, resolution: u32, crop: bool) -> Result<Array3<f32>> {
        self.check_resolution(resolution)?;
        Ok(self.preprocess(image, resolution, crop))
    }

    fn project(
        &self,
        input: &Array3<f32>,
        _tokens: Option<&diffsim_core::IPTokenSet>,
        site: &AttentionSite,
        source_id: &str,
    ) -> Result<ProjectedLatents> {
        self.validate_site(site)?;
        let Block::Layer(layer) = site.block else { unreachable!("validated") };
        let model = self.model()?;
        let heads = model.config.num_attention_heads;
        match model.forward(input, Some(layer as usize), 0)? {
            VitOutput::Projections { q, k, v } => Ok(ProjectedLatents::new(
                nn::split_heads(q.view(), heads)?,
                nn::split_heads(k.view(), heads)?,
                nn::split_heads(v.view(), heads)?,
                site.clone(),
                source_id,
            )?),
            VitOutput::Hidden(_) => unreachable!("capture requested"),
        }
    }

    fn weights_status(&self) -> WeightsStatus {
        // config.json is optional; the default architecture applies without it
        let (config, weights) = self.files();
        let missing = if self.dir.is_some() && weights.is_file() { Vec::new() } else { vec![weights.clone()] };
        let mut files = vec![weights.clone()];
        if config.is_file() {
            files.push(config);
        }
        WeightsStatus { backend_id: self.id.into(), expected: Some(weights), files, missing }
    }
}
