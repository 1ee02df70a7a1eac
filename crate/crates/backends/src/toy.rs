//! Seeded toy backbones that run the whole pipeline without checkpoints.
//!
//! The image is reduced to a 16×16 RGB canvas in [-1, 1], cut into 4×4
//! patches (16 tokens), embedded to width 16 and passed through two
//! pre-norm transformer layers with two 8-wide heads. `toy-cross` adds a
//! cross-attention sublayer per layer that reads image tokens produced by
//! an attention-pooling projector over the clean patches.
//!
//! All weights are drawn from ChaCha8 seeded with [`TOY_WEIGHT_SEED`].

use diffsim_core::{AttentionKind, AttentionSite, Block, IPTokenSet, ProjectedLatents};
use ndarray::{s, Array1, Array2, Array3, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::backend::{Backend, DEFAULT_TIMESTEP};
use crate::error::{Error, Result};
use crate::image::{prepare, SourceImage};
use crate::nn::{self, gelu, Linear};
use crate::schedule::NoiseSchedule;

pub const TOY_WEIGHT_SEED: u64 = 0x0D1F_F51A_2024;
pub const TOY_CANVAS: usize = 16;
pub const TOY_PATCH: usize = 4;
pub const TOY_WIDTH: usize = 16;
pub const TOY_HEADS: usize = 2;
pub const TOY_LAYERS: usize = 2;
pub const TOY_MLP: usize = 32;
pub const DEFAULT_TOY_IP_TOKENS: usize = 4;

const PATCH_DIM: usize = 3 * TOY_PATCH * TOY_PATCH;
const GRID: usize = TOY_CANVAS / TOY_PATCH;

struct Norm {
    gamma: Array1<f32>,
    beta: Array1<f32>,
}

impl Norm {
    fn forward(&self, x: ArrayView2<f32>) -> Array2<f32> {
        let mut out = x.to_owned();
        for mut row in out.axis_iter_mut(Axis(0)) {
            let n = row.len() as f32;
            let mean = row.sum() / n;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f32>() / n;
            let inv = 1.0 / (var + 1e-5).sqrt();
            for (i, v) in row.iter_mut().enumerate() {
                *v = (*v - mean) * inv * self.gamma[i] + self.beta[i];
            }
        }
        out
    }
}

struct AttnWeights {
    norm: Norm,
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
}

struct Layer {
    attn: AttnWeights,
    cross: Option<AttnWeights>,
    mlp_norm: Norm,
    fc1: Linear,
    fc2: Linear,
}

struct Projector {
    embed: Linear,
    pos: Array2<f32>,
    queries: Array2<f32>,
    k: Linear,
    v: Linear,
    norm: Norm,
}

/// Draws weights in a fixed order so both toy variants share the trunk.
struct Init(ChaCha8Rng);

impl Init {
    fn matrix(&mut self, rows: usize, cols: usize, scale: f32) -> Array2<f32> {
        Array2::from_shape_simple_fn((rows, cols), || {
            let z: f32 = StandardNormal.sample(&mut self.0);
            z * scale
        })
    }

    fn vector(&mut self, n: usize, scale: f32) -> Array1<f32> {
        Array1::from_shape_simple_fn(n, || {
            let z: f32 = StandardNormal.sample(&mut self.0);
            z * scale
        })
    }

    /// `out × in` weight with `1/√in` scale and a small bias.
    fn linear(&mut self, input: usize, output: usize) -> Linear {
        let w = self.matrix(output, input, 1.0 / (input as f32).sqrt());
        let b = self.vector(output, 0.02);
        Linear::new(w, Some(b))
    }

    fn norm(&mut self, n: usize) -> Norm {
        Norm { gamma: self.vector(n, 0.1) + 1.0, beta: self.vector(n, 0.1) }
    }

    fn attn(&mut self, kv_in: usize) -> AttnWeights {
        AttnWeights {
            norm: self.norm(TOY_WIDTH),
            q: self.linear(TOY_WIDTH, TOY_WIDTH),
            k: self.linear(kv_in, TOY_WIDTH),
            v: self.linear(kv_in, TOY_WIDTH),
            out: self.linear(TOY_WIDTH, TOY_WIDTH),
        }
    }
}

/// Toy patch-attention network, in self-only or self+cross form.
pub struct ToyBackend {
    id: &'static str,
    cross: bool,
    n_ip: usize,
    embed: Linear,
    pos: Array2<f32>,
    time: Linear,
    layers: Vec<Layer>,
    projector: Option<Projector>,
    schedule: NoiseSchedule,
}

impl ToyBackend {
    pub fn self_attention() -> Self {
        Self::build("toy-self", false, DEFAULT_TOY_IP_TOKENS)
    }

    pub fn cross_attention() -> Self {
        Self::cross_attention_with_tokens(DEFAULT_TOY_IP_TOKENS)
    }

    pub fn cross_attention_with_tokens(n_ip: usize) -> Self {
        Self::build("toy-cross", true, n_ip.max(1))
    }

    fn build(id: &'static str, cross: bool, n_ip: usize) -> Self {
        let mut init = Init(ChaCha8Rng::seed_from_u64(TOY_WEIGHT_SEED));
        let embed = init.linear(PATCH_DIM, TOY_WIDTH);
        let pos = init.matrix(GRID * GRID, TOY_WIDTH, 0.5);
        let time = init.linear(TOY_WIDTH, TOY_WIDTH);
        let mut layers: Vec<Layer> = (0..TOY_LAYERS)
            .map(|_| Layer {
                attn: init.attn(TOY_WIDTH),
                cross: None,
                mlp_norm: init.norm(TOY_WIDTH),
                fc1: init.linear(TOY_WIDTH, TOY_MLP),
                fc2: init.linear(TOY_MLP, TOY_WIDTH),
            })
            .collect();
        let projector = if cross {
            for layer in &mut layers {
                layer.cross = Some(init.attn(TOY_WIDTH));
            }
            let embed = init.linear(PATCH_DIM, TOY_WIDTH);
            let pos = init.matrix(GRID * GRID, TOY_WIDTH, 0.5);
            let k = init.linear(TOY_WIDTH, TOY_WIDTH);
            let v = init.linear(TOY_WIDTH, TOY_WIDTH);
            let norm = init.norm(TOY_WIDTH);
            // queries drawn last so the token count does not shift other weights
            let queries = init.matrix(n_ip, TOY_WIDTH, 1.0);
            Some(Projector { embed, pos, queries, k, v, norm })
        } else {
            None
        };
        ToyBackend {
            id,
            cross,
            n_ip,
            embed,
            pos,
            time,
            layers,
            projector,
            schedule: NoiseSchedule::toy(),
        }
    }

    pub fn ip_token_count(&self) -> usize {
        self.n_ip
    }

    fn kind(&self) -> AttentionKind {
        if self.cross {
            AttentionKind::Cross
        } else {
            AttentionKind::SelfAttn
        }
    }

    fn canvas(&self, image: &SourceImage, resolution: u32, crop: bool) -> Array3<f32> {
        let img = prepare(image, resolution, crop);
        let cell = resolution as usize / TOY_CANVAS;
        let mut out = Array3::<f32>::zeros((3, TOY_CANVAS, TOY_CANVAS));
        for (x, y, p) in img.enumerate_pixels() {
            let (cy, cx) = (y as usize / cell, x as usize / cell);
            for c in 0..3 {
                out[[c, cy, cx]] += p[c] as f32;
            }
        }
        let denom = (cell * cell) as f32 * 255.0;
        out.mapv_inplace(|v| v / denom * 2.0 - 1.0);
        out
    }
}

/// `[3, 16, 16]` to `[16 tokens, 48]` with features ordered (channel, row, col).
pub fn patchify(x: &Array3<f32>) -> Result<Array2<f32>> {
    if x.dim() != (3, TOY_CANVAS, TOY_CANVAS) {
        return Err(Error::Shape(format!("toy input must be [3, 16, 16], got {:?}", x.dim())));
    }
    Ok(Array2::from_shape_fn((GRID * GRID, PATCH_DIM), |(t, f)| {
        let (gy, gx) = (t / GRID, t % GRID);
        let (c, r) = (f / (TOY_PATCH * TOY_PATCH), f % (TOY_PATCH * TOY_PATCH));
        let (py, px) = (r / TOY_PATCH, r % TOY_PATCH);
        x[[c, gy * TOY_PATCH + py, gx * TOY_PATCH + px]]
    }))
}

fn heads(x: &Array2<f32>) -> Array3<f32> {
    nn::split_heads(x.view(), TOY_HEADS).expect("toy width divides into heads")
}

fn mix(q: &Array2<f32>, k: &Array2<f32>, v: &Array2<f32>, out: &Linear) -> Result<Array2<f32>> {
    let a = nn::attention(q.view(), k.view(), v.view(), TOY_HEADS, None)?;
    Ok(out.forward(a.view()))
}

impl Backend for ToyBackend {
    fn id(&self) -> &str {
        self.id
    }

    fn is_diffusion(&self) -> bool {
        true
    }

    fn sites(&self) -> Vec<AttentionSite> {
        (0..TOY_LAYERS as u32)
            .map(|l| {
                AttentionSite::new(self.id, self.kind(), Block::Layer(l), 0)
                    .with_timestep(Some(DEFAULT_TIMESTEP))
            })
            .collect()
    }

    fn encode(&self, image: &SourceImage, resolution: u32, crop: bool) -> Result<Array3<f32>> {
        self.check_resolution(resolution)?;
        Ok(self.canvas(image, resolution, crop))
    }

    fn schedule(&self) -> Option<&NoiseSchedule> {
        Some(&self.schedule)
    }

    fn has_image_tokens(&self) -> bool {
        self.projector.is_some()
    }

    /// Attention pooling of the clean canvas patches by `n_ip` learned
    /// queries, followed by a layer norm. Uses the default resolution.
    fn image_tokens(&self, image: &SourceImage, crop: bool) -> Result<IPTokenSet> {
        let p = self.projector.as_ref().ok_or_else(|| Error::NoImageTokens(self.id.into()))?;
        let patches = patchify(&self.canvas(image, self.default_resolution(), crop))?;
        let h = p.embed.forward(patches.view()) + &p.pos;
        let k = p.k.forward(h.view());
        let v = p.v.forward(h.view());
        let pooled = nn::attention(p.queries.view(), k.view(), v.view(), 1, None)?;
        Ok(IPTokenSet::new(p.norm.forward(pooled.view()), image.hash())?)
    }

    fn project(
        &self,
        input: &Array3<f32>,
        tokens: Option<&IPTokenSet>,
        site: &AttentionSite,
        source_id: &str,
    ) -> Result<ProjectedLatents> {
        self.validate_site(site)?;
        let target = match site.block {
            Block::Layer(l) => l as usize,
            _ => unreachable!("validated"),
        };
        let t = site.timestep.expect("validated") as f32;
        let ip = match (self.cross, tokens) {
            (true, Some(ip)) if ip.tokens.ncols() == TOY_WIDTH => Some(&ip.tokens),
            (true, Some(ip)) => {
                return Err(Error::Shape(format!(
                    "toy image tokens must be {TOY_WIDTH} wide, got {}",
                    ip.tokens.ncols()
                )))
            }
            (true, None) => {
                return Err(Error::InvalidConfig("toy-cross extraction needs image tokens".into()))
            }
            (false, _) => None,
        };

        let temb = self.time.forward(
            nn::timestep_embedding(t, TOY_WIDTH, true, 0.0)
                .view()
                .insert_axis(Axis(0)),
        );
        let mut h = self.embed.forward(patchify(input)?.view()) + &self.pos;
        h += &temb.slice(s![0, ..]);

        for (i, layer) in self.layers.iter().enumerate() {
            let a = &layer.attn;
            let n = a.norm.forward(h.view());
            let (q, k, v) = (a.q.forward(n.view()), a.k.forward(n.view()), a.v.forward(n.view()));
            if i == target && !self.cross {
                return Ok(ProjectedLatents::new(heads(&q), heads(&k), heads(&v), site.clone(), source_id)?);
            }
            h += &mix(&q, &k, &v, &a.out)?;

            if let (Some(c), Some(ip)) = (&layer.cross, ip) {
                let n = c.norm.forward(h.view());
                let q = c.q.forward(n.view());
                let (k, v) = (c.k.forward(ip.view()), c.v.forward(ip.view()));
                if i == target {
                    return Ok(ProjectedLatents::new(heads(&q), heads(&k), heads(&v), site.clone(), source_id)?);
                }
                h += &mix(&q, &k, &v, &c.out)?;
            }

            let n = layer.mlp_norm.forward(h.view());
            let hidden = layer.fc1.forward(n.view()).mapv(gelu);
            h += &layer.fc2.forward(hidden.view());
        }
        unreachable!("validated site index is below the layer count")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::{Rgb, RgbImage};

    fn image(seed: u8) -> SourceImage {
        SourceImage::from_rgb(RgbImage::from_fn(40, 32, |x, y| {
            Rgb([(x * 6) as u8 ^ seed, (y * 7) as u8, seed.wrapping_mul(3)])
        }))
    }

    #[test]
    fn patch_tokens() {
        let b = ToyBackend::self_attention();
        let x = b.encode(&image(1), 512, false).unwrap();
        assert_eq!(x.dim(), (3, 16, 16));
        assert!(x.iter().all(|v| (-1.0..=1.0).contains(v)));
        let p = patchify(&x).unwrap();
        assert_eq!(p.dim(), (16, 48));
        assert_eq!(p[[5, 0]], x[[0, 4, 4]]);
        assert_eq!(p[[5, 17]], x[[1, 4, 5]]);
    }

    #[test]
    fn two_self_sites_with_16_tokens() {
        let b = ToyBackend::self_attention();
        let sites = b.sites();
        assert_eq!(sites.len(), 2);
        let x = b.encode(&image(2), 512, false).unwrap();
        for site in &sites {
            let p = b.project(&x, None, site, "img").unwrap();
            assert_eq!((p.heads(), p.query_tokens(), p.head_dim()), (2, 16, 8));
            let again = b.project(&x, None, site, "img").unwrap();
            assert_eq!(p, again);
        }
    }

    #[test]
    fn weights_are_shared_between_variants() {
        let s = ToyBackend::self_attention();
        let c = ToyBackend::cross_attention_with_tokens(7);
        assert_eq!(s.embed.forward(Array2::eye(48).view()), c.embed.forward(Array2::eye(48).view()));
        assert_eq!(c.ip_token_count(), 7);
    }

    #[test]
    fn cross_sites_read_image_tokens() {
        let b = ToyBackend::cross_attention();
        let img = image(3);
        let ip = b.image_tokens(&img, false).unwrap();
        assert_eq!(ip.tokens.dim(), (DEFAULT_TOY_IP_TOKENS, TOY_WIDTH));
        assert_eq!(ip, b.image_tokens(&img, false).unwrap());
        let x = b.encode(&img, 512, false).unwrap();
        for site in b.sites() {
            assert_eq!(site.kind, AttentionKind::Cross);
            let p = b.project(&x, Some(&ip), &site, "img").unwrap();
            assert_eq!((p.query_tokens(), p.kv_tokens()), (16, DEFAULT_TOY_IP_TOKENS));
        }
        assert!(b.project(&x, None, &b.sites()[0], "img").is_err());
        let s = ToyBackend::self_attention();
        assert!(matches!(s.image_tokens(&img, false), Err(Error::NoImageTokens(_))));
    }

    #[test]
    fn rejects_foreign_sites() {
        let b = ToyBackend::self_attention();
        let x = b.encode(&image(4), 512, false).unwrap();
        let bad = AttentionSite::new("toy-self", AttentionKind::SelfAttn, Block::Layer(2), 0)
            .with_timestep(Some(10));
        assert!(matches!(b.project(&x, None, &bad, "i"), Err(Error::SiteNotFound { .. })));
        let no_t = b.sites()[0].clone().with_timestep(None);
        assert!(b.project(&x, None, &no_t, "i").is_err());
        assert!(matches!(b.encode(&image(4), 500, false), Err(Error::UnsupportedResolution { .. })));
    }

    #[test]
    fn timestep_changes_projections() {
        let b = ToyBackend::self_attention();
        let x = b.encode(&image(5), 512, false).unwrap();
        let s0 = b.sites()[1].clone().with_timestep(Some(100));
        let s1 = b.sites()[1].clone().with_timestep(Some(900));
        assert_ne!(b.project(&x, None, &s0, "i").unwrap().q(), b.project(&x, None, &s1, "i").unwrap().q());
    }
}
