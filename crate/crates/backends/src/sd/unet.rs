//! diffusers `UNet2DConditionModel` (batch size one), optionally with
//! IP-Adapter image-token attention in every cross-attention layer, that
//! can stop at a chosen attention layer and hand back its projections.

use diffsim_core::{AttentionKind, Block};
use ndarray::{concatenate, Array1, Array2, Array3, Axis};

use crate::error::{Error, Result};
use crate::nn::{self, Conv2d, GroupNorm, LayerNorm, Linear, Weights};
use crate::sd::config::UNetConfig;

/// Which diffusers block an attention layer lives in.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlockRef {
    Down(usize),
    Mid,
    Up(usize),
}

/// One attention layer: block, attention module index within the block,
/// transformer block index within the module, and self or cross.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerRef {
    pub block: BlockRef,
    pub attention: usize,
    pub depth: usize,
    pub kind: AttentionKind,
}

/// Attention-bearing blocks in forward order, with the public names
/// `down_i` / `mid` / `up_i` that count only such blocks.
pub fn attention_blocks(config: &UNetConfig) -> Vec<(Block, BlockRef, usize, usize)> {
    let layers = config.layers();
    let depths = config.depths();
    let mut out = Vec::new();
    let mut n = 0u8;
    for i in 0..config.n_blocks() {
        if config.down_has_attention(i) {
            out.push((Block::Down(n), BlockRef::Down(i), layers[i], depths[i]));
            n += 1;
        }
    }
    out.push((Block::Mid, BlockRef::Mid, 1, *depths.last().expect("nonempty")));
    let (rl, rd): (Vec<usize>, Vec<usize>) = (layers.iter().rev().copied().collect(), depths.iter().rev().copied().collect());
    let mut n = 0u8;
    for i in 0..config.n_blocks() {
        if config.up_has_attention(i) {
            out.push((Block::Up(n), BlockRef::Up(i), rl[i] + 1, rd[i]));
            n += 1;
        }
    }
    out
}

/// Resolves a public (block, ordinal) pair; `ordinal = attention · depth + d`.
pub fn resolve(config: &UNetConfig, block: Block, ordinal: u32, kind: AttentionKind) -> Option<LayerRef> {
    let (_, r, attentions, depth) = attention_blocks(config).into_iter().find(|b| b.0 == block)?;
    let ordinal = ordinal as usize;
    (ordinal < attentions * depth).then_some(LayerRef { block: r, attention: ordinal / depth, depth: ordinal % depth, kind })
}

pub struct Captured {
    pub q: Array2<f32>,
    pub k: Array2<f32>,
    pub v: Array2<f32>,
    pub heads: usize,
}

pub enum Flow<T> {
    Go(T),
    Hit(Captured),
}

macro_rules! go {
    ($e:expr) => {
        match $e? {
            Flow::Go(v) => v,
            Flow::Hit(c) => return Ok(Flow::Hit(c)),
        }
    };
}

/// Conditioning for one pass.
pub struct Conditioning<'a> {
    /// Text encoder states `[77, cross_dim]`.
    pub context: &'a Array2<f32>,
    /// Image tokens `[n, cross_dim]` for IP-Adapter layers.
    pub ip_tokens: Option<&'a Array2<f32>>,
    pub ip_scale: f32,
    /// SDXL pooled text embedding and size/crop ids.
    pub added: Option<(&'a Array1<f32>, [f32; 6])>,
}

struct Resnet {
    norm1: GroupNorm,
    conv1: Conv2d,
    temb: Linear,
    norm2: GroupNorm,
    conv2: Conv2d,
    shortcut: Option<Conv2d>,
}

impl Resnet {
    fn load(w: &Weights, groups: usize, eps: f32) -> Result<Self> {
        Ok(Resnet {
            norm1: GroupNorm::load(&w.pp("norm1"), groups, eps)?,
            conv1: Conv2d::load(&w.pp("conv1"), 1, 1)?,
            temb: Linear::load(&w.pp("time_emb_proj"), true)?,
            norm2: GroupNorm::load(&w.pp("norm2"), groups, eps)?,
            conv2: Conv2d::load(&w.pp("conv2"), 1, 1)?,
            shortcut: if w.has("conv_shortcut.weight") { Some(Conv2d::load(&w.pp("conv_shortcut"), 1, 0)?) } else { None },
        })
    }

    fn forward(&self, x: &Array3<f32>, emb_act: &Array2<f32>) -> Result<Array3<f32>> {
        let mut h = self.norm1.forward(x)?;
        h.mapv_inplace(nn::silu);
        let mut h = self.conv1.forward(&h)?;
        let t = self.temb.forward(emb_act.view());
        for (mut plane, &tv) in h.axis_iter_mut(Axis(0)).zip(t.row(0)) {
            plane += tv;
        }
        let mut h = self.norm2.forward(&h)?;
        h.mapv_inplace(nn::silu);
        let h = self.conv2.forward(&h)?;
        let skip = match &self.shortcut {
            Some(c) => c.forward(x)?,
            None => x.clone(),
        };
        Ok(skip + h)
    }
}

struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    heads: usize,
}

impl Attention {
    fn load(w: &Weights, heads: usize) -> Result<Self> {
        Ok(Attention {
            q: Linear::load_auto(&w.pp("to_q"))?,
            k: Linear::load_auto(&w.pp("to_k"))?,
            v: Linear::load_auto(&w.pp("to_v"))?,
            out: Linear::load_auto(&w.pp("to_out.0"))?,
            heads,
        })
    }
}

struct TransformerBlock {
    norm1: LayerNorm,
    attn1: Attention,
    norm2: LayerNorm,
    attn2: Attention,
    /// IP-Adapter key/value projections of image tokens.
    ip: Option<(Linear, Linear)>,
    norm3: LayerNorm,
    ff_in: Linear,
    ff_out: Linear,
}

impl TransformerBlock {
    fn forward(&self, mut h: Array2<f32>, cond: &Conditioning, capture: Option<AttentionKind>) -> Result<Flow<Array2<f32>>> {
        let n = self.norm1.forward(h.view());
        let a = &self.attn1;
        let (q, k, v) = (a.q.forward(n.view()), a.k.forward(n.view()), a.v.forward(n.view()));
        if capture == Some(AttentionKind::SelfAttn) {
            return Ok(Flow::Hit(Captured { q, k, v, heads: a.heads }));
        }
        h += &a.out.forward(nn::attention(q.view(), k.view(), v.view(), a.heads, None)?.view());

        let n = self.norm2.forward(h.view());
        let a = &self.attn2;
        let q = a.q.forward(n.view());
        let ip = match (&self.ip, cond.ip_tokens) {
            (Some((kp, vp)), Some(tokens)) => Some((kp.forward(tokens.view()), vp.forward(tokens.view()))),
            _ => None,
        };
        if capture == Some(AttentionKind::Cross) {
            let (k, v) = ip.ok_or_else(|| Error::InvalidConfig("cross-attention capture needs image tokens".into()))?;
            return Ok(Flow::Hit(Captured { q, k, v, heads: a.heads }));
        }
        let (k, v) = (a.k.forward(cond.context.view()), a.v.forward(cond.context.view()));
        let mut mixed = nn::attention(q.view(), k.view(), v.view(), a.heads, None)?;
        if let Some((k, v)) = ip {
            let extra = nn::attention(q.view(), k.view(), v.view(), a.heads, None)?;
            mixed.scaled_add(cond.ip_scale, &extra);
        }
        h += &a.out.forward(mixed.view());

        let n = self.norm3.forward(h.view());
        let proj = self.ff_in.forward(n.view());
        let inner = proj.ncols() / 2;
        let gated = Array2::from_shape_fn((proj.nrows(), inner), |(i, j)| proj[[i, j]] * nn::gelu(proj[[i, inner + j]]));
        h += &self.ff_out.forward(gated.view());
        Ok(Flow::Go(h))
    }
}

struct Transformer2D {
    norm: GroupNorm,
    proj_in: Linear,
    blocks: Vec<TransformerBlock>,
    proj_out: Linear,
}

impl Transformer2D {
    fn load(w: &Weights, heads: usize, groups: usize, ip: &mut IpSlots) -> Result<Self> {
        let n = w.pp("transformer_blocks").count_children();
        if n == 0 {
            return Err(w.malformed("no transformer blocks"));
        }
        let blocks = (0..n)
            .map(|d| {
                let b = w.pp("transformer_blocks").pp(d);
                Ok(TransformerBlock {
                    norm1: LayerNorm::load(&b.pp("norm1"), 1e-5)?,
                    attn1: Attention::load(&b.pp("attn1"), heads)?,
                    norm2: LayerNorm::load(&b.pp("norm2"), 1e-5)?,
                    attn2: Attention::load(&b.pp("attn2"), heads)?,
                    ip: ip.next()?,
                    norm3: LayerNorm::load(&b.pp("norm3"), 1e-5)?,
                    ff_in: Linear::load(&b.pp("ff.net.0.proj"), true)?,
                    ff_out: Linear::load(&b.pp("ff.net.2"), true)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Transformer2D {
            norm: GroupNorm::load(&w.pp("norm"), groups, 1e-6)?,
            proj_in: Linear::load(&w.pp("proj_in"), true)?,
            blocks,
            proj_out: Linear::load(&w.pp("proj_out"), true)?,
        })
    }

    fn forward(&self, x: &Array3<f32>, cond: &Conditioning, capture: Option<(usize, AttentionKind)>) -> Result<Flow<Array3<f32>>> {
        let (_, hh, ww) = x.dim();
        let n = self.norm.forward(x)?;
        let mut h = self.proj_in.forward(nn::to_tokens(&n).view());
        for (d, block) in self.blocks.iter().enumerate() {
            let kind = capture.filter(|c| c.0 == d).map(|c| c.1);
            h = go!(block.forward(h, cond, kind));
        }
        let h = self.proj_out.forward(h.view());
        Ok(Flow::Go(nn::from_tokens(&h, hh, ww) + x))
    }
}

/// Hands out IP-Adapter projections in the adapter's layer order.
pub struct IpSlots {
    weights: Option<Weights>,
    next: usize,
}

impl IpSlots {
    pub fn new(weights: Option<Weights>) -> Self {
        IpSlots { weights, next: 0 }
    }

    fn next(&mut self) -> Result<Option<(Linear, Linear)>> {
        let Some(w) = &self.weights else { return Ok(None) };
        // adapter modules are numbered per attention processor; cross-attention ones are odd
        let idx = 2 * self.next + 1;
        self.next += 1;
        let m = w.pp(idx);
        Ok(Some((Linear::load(&m.pp("to_k_ip"), false)?, Linear::load(&m.pp("to_v_ip"), false)?)))
    }

    pub fn used(&self) -> usize {
        self.next
    }
}

struct DownBlock {
    resnets: Vec<Resnet>,
    attentions: Vec<Transformer2D>,
    down: Option<Conv2d>,
}

struct UpBlock {
    resnets: Vec<Resnet>,
    attentions: Vec<Transformer2D>,
    up: Option<Conv2d>,
}

pub struct UNet {
    config: UNetConfig,
    time_1: Linear,
    time_2: Linear,
    add_1: Option<Linear>,
    add_2: Option<Linear>,
    conv_in: Conv2d,
    downs: Vec<DownBlock>,
    mid: (Resnet, Transformer2D, Resnet),
    ups: Vec<UpBlock>,
    norm_out: GroupNorm,
    conv_out: Conv2d,
    has_ip: bool,
}

impl UNet {
    /// `ip` is the `ip_adapter` prefix of an IP-Adapter checkpoint; its
    /// modules attach to cross-attention layers in processor order
    /// (down blocks, up blocks, then mid).
    pub fn load(w: &Weights, config: UNetConfig, ip: Option<Weights>) -> Result<Self> {
        let groups = config.norm_num_groups;
        let eps = config.norm_eps;
        let heads = config.heads();
        let layers = config.layers();
        let n = config.n_blocks();
        let has_ip = ip.is_some();
        let mut slots = IpSlots::new(ip);

        let mut downs = Vec::with_capacity(n);
        for i in 0..n {
            let b = w.pp("down_blocks").pp(i);
            let resnets = (0..layers[i]).map(|j| Resnet::load(&b.pp("resnets").pp(j), groups, eps)).collect::<Result<_>>()?;
            let attentions = if config.down_has_attention(i) {
                (0..layers[i])
                    .map(|j| Transformer2D::load(&b.pp("attentions").pp(j), heads[i], groups, &mut slots))
                    .collect::<Result<_>>()?
            } else {
                Vec::new()
            };
            let down = if i + 1 < n { Some(Conv2d::load(&b.pp("downsamplers.0.conv"), 2, 1)?) } else { None };
            downs.push(DownBlock { resnets, attentions, down });
        }

        let rheads: Vec<usize> = heads.iter().rev().copied().collect();
        let rlayers: Vec<usize> = layers.iter().rev().copied().collect();
        let mut ups = Vec::with_capacity(n);
        for i in 0..n {
            let b = w.pp("up_blocks").pp(i);
            let count = rlayers[i] + 1;
            let resnets = (0..count).map(|j| Resnet::load(&b.pp("resnets").pp(j), groups, eps)).collect::<Result<_>>()?;
            let attentions = if config.up_has_attention(i) {
                (0..count)
                    .map(|j| Transformer2D::load(&b.pp("attentions").pp(j), rheads[i], groups, &mut slots))
                    .collect::<Result<_>>()?
            } else {
                Vec::new()
            };
            let up = if i + 1 < n { Some(Conv2d::load(&b.pp("upsamplers.0.conv"), 1, 1)?) } else { None };
            ups.push(UpBlock { resnets, attentions, up });
        }

        let m = w.pp("mid_block");
        let mid = (
            Resnet::load(&m.pp("resnets.0"), groups, eps)?,
            Transformer2D::load(&m.pp("attentions.0"), *heads.last().expect("nonempty"), groups, &mut slots)?,
            Resnet::load(&m.pp("resnets.1"), groups, eps)?,
        );

        let text_time = config.addition_embed_type.as_deref() == Some("text_time");
        Ok(UNet {
            time_1: Linear::load(&w.pp("time_embedding.linear_1"), true)?,
            time_2: Linear::load(&w.pp("time_embedding.linear_2"), true)?,
            add_1: if text_time { Some(Linear::load(&w.pp("add_embedding.linear_1"), true)?) } else { None },
            add_2: if text_time { Some(Linear::load(&w.pp("add_embedding.linear_2"), true)?) } else { None },
            conv_in: Conv2d::load(&w.pp("conv_in"), 1, 1)?,
            downs,
            mid,
            ups,
            norm_out: GroupNorm::load(&w.pp("conv_norm_out"), groups, eps)?,
            conv_out: Conv2d::load(&w.pp("conv_out"), 1, 1)?,
            config,
            has_ip,
        })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    pub fn has_ip_adapter(&self) -> bool {
        self.has_ip
    }

    fn embedding(&self, t: f32, cond: &Conditioning) -> Result<Array2<f32>> {
        let c0 = self.config.block_out_channels[0];
        let base = nn::timestep_embedding(t, c0, self.config.flip_sin_to_cos, self.config.freq_shift);
        let mut emb = self.time_2.forward(self.time_1.forward(base.view().insert_axis(Axis(0))).mapv(nn::silu).view());
        if let (Some(l1), Some(l2)) = (&self.add_1, &self.add_2) {
            let (pooled, ids) = cond
                .added
                .ok_or_else(|| Error::InvalidConfig("this U-Net needs pooled text embeddings and size ids".into()))?;
            let dim = self.config.addition_time_embed_dim.unwrap_or(256);
            let mut parts = vec![pooled.view().to_owned()];
            for id in ids {
                parts.push(nn::timestep_embedding(id, dim, self.config.flip_sin_to_cos, self.config.freq_shift));
            }
            let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
            let input = concatenate(Axis(0), &views).map_err(|e| Error::Shape(e.to_string()))?;
            let aug = l2.forward(l1.forward(input.view().insert_axis(Axis(0))).mapv(nn::silu).view());
            emb += &aug;
        }
        Ok(emb)
    }

    /// Full pass returning the noise prediction, or the projections of
    /// `target` as soon as that layer is reached.
    pub fn forward(
        &self,
        x: &Array3<f32>,
        t: f32,
        cond: &Conditioning,
        target: Option<LayerRef>,
    ) -> Result<Flow<Array3<f32>>> {
        let emb = self.embedding(t, cond)?.mapv(nn::silu);
        let at = |block: BlockRef, attention: usize| {
            target.filter(|r| r.block == block && r.attention == attention).map(|r| (r.depth, r.kind))
        };

        let mut h = self.conv_in.forward(x)?;
        let mut skips = vec![h.clone()];
        for (i, b) in self.downs.iter().enumerate() {
            for (j, r) in b.resnets.iter().enumerate() {
                h = r.forward(&h, &emb)?;
                if let Some(a) = b.attentions.get(j) {
                    h = go!(a.forward(&h, cond, at(BlockRef::Down(i), j)));
                }
                skips.push(h.clone());
            }
            if let Some(d) = &b.down {
                h = d.forward(&h)?;
                skips.push(h.clone());
            }
        }

        h = self.mid.0.forward(&h, &emb)?;
        h = go!(self.mid.1.forward(&h, cond, at(BlockRef::Mid, 0)));
        h = self.mid.2.forward(&h, &emb)?;

        for (i, b) in self.ups.iter().enumerate() {
            for (j, r) in b.resnets.iter().enumerate() {
                let skip = skips.pop().ok_or_else(|| Error::Shape("skip connections exhausted".into()))?;
                h = concatenate![Axis(0), h, skip];
                h = r.forward(&h, &emb)?;
                if let Some(a) = b.attentions.get(j) {
                    h = go!(a.forward(&h, cond, at(BlockRef::Up(i), j)));
                }
            }
            if let Some(u) = &b.up {
                h = u.forward(&nn::upsample_nearest2x(&h))?;
            }
        }
        if target.is_some() {
            return Err(Error::Shape("capture target not reached".into()));
        }
        let mut h = self.norm_out.forward(&h)?;
        h.mapv_inplace(nn::silu);
        Ok(Flow::Go(self.conv_out.forward(&h)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sd15_block_naming() {
        let c = UNetConfig::sd15();
        let blocks = attention_blocks(&c);
        let names: Vec<String> = blocks.iter().map(|b| b.0.to_string()).collect();
        assert_eq!(names, ["down_0", "down_1", "down_2", "mid", "up_0", "up_1", "up_2"]);
        assert_eq!(blocks[4].1, BlockRef::Up(1));
        assert_eq!(blocks[4].2, 3);
        let r = resolve(&c, Block::Up(0), 2, AttentionKind::SelfAttn).unwrap();
        assert_eq!((r.block, r.attention, r.depth), (BlockRef::Up(1), 2, 0));
        assert!(resolve(&c, Block::Up(0), 3, AttentionKind::SelfAttn).is_none());
        assert!(resolve(&c, Block::Down(3), 0, AttentionKind::SelfAttn).is_none());
    }

    #[test]
    fn sdxl_ordinals_span_depth() {
        let c = UNetConfig::sdxl();
        let blocks = attention_blocks(&c);
        let counts: Vec<(String, usize)> = blocks.iter().map(|b| (b.0.to_string(), b.2 * b.3)).collect();
        assert_eq!(
            counts,
            [("down_0", 4), ("down_1", 20), ("mid", 10), ("up_0", 30), ("up_1", 6)].map(|(a, b)| (a.to_string(), b))
        );
        let r = resolve(&c, Block::Down(1), 13, AttentionKind::Cross).unwrap();
        assert_eq!((r.block, r.attention, r.depth), (BlockRef::Down(2), 1, 3));
    }
}
