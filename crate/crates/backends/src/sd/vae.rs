//! Encoder half of the diffusers `AutoencoderKL`: image in [-1, 1] to the
//! scaled posterior mean.

use ndarray::{s, Array3, Axis};

use crate::error::Result;
use crate::nn::{self, Conv2d, GroupNorm, Linear, Weights};
use crate::sd::config::VaeConfig;

const EPS: f32 = 1e-6;

struct Resnet {
    norm1: GroupNorm,
    conv1: Conv2d,
    norm2: GroupNorm,
    conv2: Conv2d,
    shortcut: Option<Conv2d>,
}

impl Resnet {
    fn load(w: &Weights, groups: usize) -> Result<Self> {
        Ok(Resnet {
            norm1: GroupNorm::load(&w.pp("norm1"), groups, EPS)?,
            conv1: Conv2d::load(&w.pp("conv1"), 1, 1)?,
            norm2: GroupNorm::load(&w.pp("norm2"), groups, EPS)?,
            conv2: Conv2d::load(&w.pp("conv2"), 1, 1)?,
            shortcut: if w.has("conv_shortcut.weight") { Some(Conv2d::load(&w.pp("conv_shortcut"), 1, 0)?) } else { None },
        })
    }

    fn forward(&self, x: &Array3<f32>) -> Result<Array3<f32>> {
        let mut h = self.norm1.forward(x)?;
        h.mapv_inplace(nn::silu);
        let mut h = self.norm2.forward(&self.conv1.forward(&h)?)?;
        h.mapv_inplace(nn::silu);
        let h = self.conv2.forward(&h)?;
        Ok(match &self.shortcut {
            Some(c) => c.forward(x)? + h,
            None => x + &h,
        })
    }
}

/// Single-head spatial self-attention with a residual connection.
struct MidAttention {
    norm: GroupNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
}

impl MidAttention {
    fn load(w: &Weights, groups: usize) -> Result<Self> {
        // older checkpoints name the projections query/key/value/proj_attn
        let name = |new: &str, old: &str| if w.has(&format!("{new}.weight")) { new.to_string() } else { old.to_string() };
        Ok(MidAttention {
            norm: GroupNorm::load(&w.pp("group_norm"), groups, EPS)?,
            q: Linear::load(&w.pp(name("to_q", "query")), true)?,
            k: Linear::load(&w.pp(name("to_k", "key")), true)?,
            v: Linear::load(&w.pp(name("to_v", "value")), true)?,
            out: Linear::load(&w.pp(name("to_out.0", "proj_attn")), true)?,
        })
    }

    fn forward(&self, x: &Array3<f32>) -> Result<Array3<f32>> {
        let (_, h, w) = x.dim();
        let t = nn::to_tokens(&self.norm.forward(x)?);
        let (q, k, v) = (self.q.forward(t.view()), self.k.forward(t.view()), self.v.forward(t.view()));
        let a = self.out.forward(nn::attention(q.view(), k.view(), v.view(), 1, None)?.view());
        Ok(nn::from_tokens(&a, h, w) + x)
    }
}

struct DownBlock {
    resnets: Vec<Resnet>,
    down: Option<Conv2d>,
}

pub struct VaeEncoder {
    conv_in: Conv2d,
    downs: Vec<DownBlock>,
    mid: (Resnet, MidAttention, Resnet),
    norm_out: GroupNorm,
    conv_out: Conv2d,
    quant: Conv2d,
    scaling: f32,
}

impl VaeEncoder {
    /// `w` is the root of a diffusers `AutoencoderKL` checkpoint.
    pub fn load(w: &Weights, config: &VaeConfig) -> Result<Self> {
        let e = w.pp("encoder");
        let groups = config.norm_num_groups;
        let n = config.block_out_channels.len();
        let downs = (0..n)
            .map(|i| {
                let b = e.pp("down_blocks").pp(i);
                Ok(DownBlock {
                    resnets: (0..config.layers_per_block)
                        .map(|j| Resnet::load(&b.pp("resnets").pp(j), groups))
                        .collect::<Result<_>>()?,
                    down: if i + 1 < n {
                        Some(Conv2d::load(&b.pp("downsamplers.0.conv"), 2, 0)?.with_padding([0, 1, 0, 1]))
                    } else {
                        None
                    },
                })
            })
            .collect::<Result<_>>()?;
        let m = e.pp("mid_block");
        Ok(VaeEncoder {
            conv_in: Conv2d::load(&e.pp("conv_in"), 1, 1)?,
            downs,
            mid: (
                Resnet::load(&m.pp("resnets.0"), groups)?,
                MidAttention::load(&m.pp("attentions.0"), groups)?,
                Resnet::load(&m.pp("resnets.1"), groups)?,
            ),
            norm_out: GroupNorm::load(&e.pp("conv_norm_out"), groups, EPS)?,
            conv_out: Conv2d::load(&e.pp("conv_out"), 1, 1)?,
            quant: Conv2d::load(&w.pp("quant_conv"), 1, 0)?,
            scaling: config.scaling_factor,
        })
    }

    /// `[3, H, W]` in [-1, 1] to `[4, H/8, W/8]` (for the usual depth).
    pub fn encode(&self, pixels: &Array3<f32>) -> Result<Array3<f32>> {
        let mut h = self.conv_in.forward(pixels)?;
        for b in &self.downs {
            for r in &b.resnets {
                h = r.forward(&h)?;
            }
            if let Some(d) = &b.down {
                h = d.forward(&h)?;
            }
        }
        h = self.mid.0.forward(&h)?;
        h = self.mid.1.forward(&h)?;
        h = self.mid.2.forward(&h)?;
        let mut h = self.norm_out.forward(&h)?;
        h.mapv_inplace(nn::silu);
        let moments = self.quant.forward(&self.conv_out.forward(&h)?)?;
        let half = moments.len_of(Axis(0)) / 2;
        Ok(moments.slice(s![..half, .., ..]).mapv(|v| v * self.scaling))
    }
}
