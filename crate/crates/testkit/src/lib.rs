//! Test-only support: brute-force oracles that share no code with the
//! optimized paths, plus seeded generators for latents and images.

pub mod oracle;

use diffsim_core::{AttentionKind, AttentionSite, Block, ProjectedLatents};
use image::{Rgb, RgbImage};
use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn toy_site() -> AttentionSite {
    AttentionSite::new("toy-self", AttentionKind::SelfAttn, Block::Layer(0), 0)
}

pub fn random_tensor(rng: &mut impl Rng, shape: (usize, usize, usize)) -> Array3<f32> {
    Array3::from_shape_simple_fn(shape, || rng.sample::<f32, _>(StandardNormal))
}

/// Random projections with `tokens` query and key/value tokens.
pub fn random_latents(rng: &mut impl Rng, heads: usize, tokens: usize, d_head: usize) -> ProjectedLatents {
    random_latents_kv(rng, heads, tokens, tokens, d_head)
}

pub fn random_latents_kv(
    rng: &mut impl Rng,
    heads: usize,
    tokens_q: usize,
    tokens_kv: usize,
    d_head: usize,
) -> ProjectedLatents {
    let q = random_tensor(rng, (heads, tokens_q, d_head));
    let k = random_tensor(rng, (heads, tokens_kv, d_head));
    let v = random_tensor(rng, (heads, tokens_kv, d_head));
    ProjectedLatents::new(q, k, v, toy_site(), "random").expect("random latents are valid")
}

/// Smooth random image: a few colored blobs on a gradient, so that
/// resampling keeps content and different seeds give different images.
pub fn random_image(seed: u64, width: u32, height: u32) -> RgbImage {
    let mut r = rng(seed);
    let base: [f32; 3] = [r.random(), r.random(), r.random()];
    let blobs: Vec<(f32, f32, f32, [f32; 3])> = (0..4)
        .map(|_| {
            (
                r.random::<f32>() * width as f32,
                r.random::<f32>() * height as f32,
                (0.1 + 0.3 * r.random::<f32>()) * width.max(height) as f32,
                [r.random(), r.random(), r.random()],
            )
        })
        .collect();
    RgbImage::from_fn(width, height, |x, y| {
        let mut c = [0f32; 3];
        for (ch, v) in c.iter_mut().enumerate() {
            *v = base[ch] * (0.5 + 0.5 * x as f32 / width as f32);
        }
        for (bx, by, rad, col) in &blobs {
            let d2 = ((x as f32 - bx).powi(2) + (y as f32 - by).powi(2)) / rad.powi(2);
            let w = (-d2).exp();
            for ch in 0..3 {
                c[ch] = c[ch] * (1.0 - w) + col[ch] * w;
            }
        }
        Rgb(c.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8))
    })
}
