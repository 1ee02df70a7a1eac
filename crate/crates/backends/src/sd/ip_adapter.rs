//! IP-Adapter Plus image projection: a perceiver resampler that turns
//! CLIP patch features into a fixed number of image tokens.

use ndarray::{concatenate, Array2, Axis};

use crate::error::Result;
use crate::nn::{self, LayerNorm, Linear, Weights};

const DIM_HEAD: usize = 64;

struct PerceiverAttention {
    norm_x: LayerNorm,
    norm_latents: LayerNorm,
    q: Linear,
    kv: Linear,
    out: Linear,
    heads: usize,
}

impl PerceiverAttention {
    /// Latents attend to the features concatenated with themselves.
    fn forward(&self, x: &Array2<f32>, latents: &Array2<f32>) -> Result<Array2<f32>> {
        let x = self.norm_x.forward(x.view());
        let l = self.norm_latents.forward(latents.view());
        let q = self.q.forward(l.view());
        let kv = self.kv.forward(concatenate![Axis(0), x, l].view());
        let inner = kv.ncols() / 2;
        let (k, v) = kv.view().split_at(Axis(1), inner);
        let a = nn::attention(q.view(), k, v, self.heads, None)?;
        Ok(self.out.forward(a.view()))
    }
}

struct FeedForward {
    norm: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

pub struct Resampler {
    latents: Array2<f32>,
    proj_in: Linear,
    layers: Vec<(PerceiverAttention, FeedForward)>,
    proj_out: Linear,
    norm_out: LayerNorm,
}

impl Resampler {
    /// `w` is the `image_proj` prefix of an IP-Adapter Plus checkpoint.
    pub fn load(w: &Weights) -> Result<Self> {
        let latents = w.get("latents")?;
        let shape = latents.shape().to_vec();
        let (n, dim) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        let latents = latents.into_shape_with_order((n, dim)).map_err(|_| w.malformed("latents shape"))?;
        if dim % DIM_HEAD != 0 {
            return Err(w.malformed(&format!("width {dim} is not a multiple of {DIM_HEAD}")));
        }
        let depth = w.pp("layers").count_children();
        let layers = (0..depth)
            .map(|i| {
                let l = w.pp("layers").pp(i);
                let (a, f) = (l.pp(0), l.pp(1));
                Ok((
                    PerceiverAttention {
                        norm_x: LayerNorm::load(&a.pp("norm1"), 1e-5)?,
                        norm_latents: LayerNorm::load(&a.pp("norm2"), 1e-5)?,
                        q: Linear::load(&a.pp("to_q"), false)?,
                        kv: Linear::load(&a.pp("to_kv"), false)?,
                        out: Linear::load(&a.pp("to_out"), false)?,
                        heads: dim / DIM_HEAD,
                    },
                    FeedForward {
                        norm: LayerNorm::load(&f.pp(0), 1e-5)?,
                        fc1: Linear::load(&f.pp(1), false)?,
                        fc2: Linear::load(&f.pp(3), false)?,
                    },
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        if layers.is_empty() {
            return Err(w.malformed("no resampler layers"));
        }
        Ok(Resampler {
            latents,
            proj_in: Linear::load(&w.pp("proj_in"), true)?,
            layers,
            proj_out: Linear::load(&w.pp("proj_out"), true)?,
            norm_out: LayerNorm::load(&w.pp("norm_out"), 1e-5)?,
        })
    }

    pub fn num_tokens(&self) -> usize {
        self.latents.nrows()
    }

    /// Image-encoder hidden states `[patches + 1, embed]` to image tokens.
    pub fn forward(&self, features: &Array2<f32>) -> Result<Array2<f32>> {
        let x = self.proj_in.forward(features.view());
        let mut latents = self.latents.clone();
        for (attn, ff) in &self.layers {
            latents += &attn.forward(&x, &latents)?;
            let h = ff.fc1.forward(ff.norm.forward(latents.view()).view()).mapv(nn::gelu);
            latents += &ff.fc2.forward(h.view());
        }
        Ok(self.norm_out.forward(self.proj_out.forward(latents.view()).view()))
    }
}
