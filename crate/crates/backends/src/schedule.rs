//! Forward-diffusion noising `x_t = √ᾱ_t · x₀ + √(1 − ᾱ_t) · ε`.

use diffsim_core::TOTAL_TIMESTEPS;
use ndarray::{Array, Dimension, Zip};
use num_traits::Float;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Cumulative signal fraction ᾱ_t of a backend.
#[derive(Clone, Debug, PartialEq)]
pub enum NoiseSchedule {
    /// ᾱ_t = 1 − t/T. Used by the toy backends.
    Linear { total: u32 },
    /// Tabulated ᾱ for t = 0..len-1; t = len aliases to the last entry.
    Table { alphas_cumprod: Vec<f64> },
}

impl NoiseSchedule {
    pub fn toy() -> Self {
        NoiseSchedule::Linear { total: TOTAL_TIMESTEPS }
    }

    /// The `scaled_linear` β schedule of Stable Diffusion:
    /// β = linspace(√β₀, √β₁, T)², ᾱ_t = Π_{s≤t} (1 − β_s).
    pub fn scaled_linear(beta_start: f64, beta_end: f64, steps: usize) -> Self {
        let (a, b) = (beta_start.sqrt(), beta_end.sqrt());
        let mut acc = 1.0;
        let alphas_cumprod = (0..steps)
            .map(|i| {
                let f = if steps > 1 { i as f64 / (steps - 1) as f64 } else { 0.0 };
                let beta = (a + (b - a) * f).powi(2);
                acc *= 1.0 - beta;
                acc
            })
            .collect();
        NoiseSchedule::Table { alphas_cumprod }
    }

    /// `linear` β schedule: β = linspace(β₀, β₁, T).
    pub fn linear_betas(beta_start: f64, beta_end: f64, steps: usize) -> Self {
        let mut acc = 1.0;
        let alphas_cumprod = (0..steps)
            .map(|i| {
                let f = if steps > 1 { i as f64 / (steps - 1) as f64 } else { 0.0 };
                acc *= 1.0 - (beta_start + (beta_end - beta_start) * f);
                acc
            })
            .collect();
        NoiseSchedule::Table { alphas_cumprod }
    }

    pub fn total(&self) -> u32 {
        match self {
            NoiseSchedule::Linear { total } => *total,
            NoiseSchedule::Table { alphas_cumprod } => alphas_cumprod.len() as u32,
        }
    }

    pub fn alpha_bar(&self, t: u32) -> Result<f64> {
        let total = self.total();
        if t > total {
            return Err(Error::InvalidConfig(format!("timestep {t} outside [0, {total}]")));
        }
        Ok(match self {
            NoiseSchedule::Linear { total } => 1.0 - t as f64 / *total as f64,
            NoiseSchedule::Table { alphas_cumprod } => {
                alphas_cumprod[(t as usize).min(alphas_cumprod.len() - 1)]
            }
        })
    }
}

pub fn forward_noise<A, D>(
    latent: &Array<A, D>,
    timestep: u32,
    noise: &Array<A, D>,
    schedule: &NoiseSchedule,
) -> Result<Array<A, D>>
where
    A: Float,
    D: Dimension,
{
    if latent.shape() != noise.shape() {
        return Err(Error::Shape(format!(
            "noise {:?} does not match latent {:?}",
            noise.shape(),
            latent.shape()
        )));
    }
    let ab = schedule.alpha_bar(timestep)?;
    let signal = A::from(ab.sqrt()).expect("float conversion");
    let sigma = A::from((1.0 - ab).max(0.0).sqrt()).expect("float conversion");
    let mut out = latent.clone();
    Zip::from(&mut out).and(noise).for_each(|x, &e| *x = signal * *x + sigma * e);
    Ok(out)
}

/// Deterministic standard-normal noise.
///
/// The generator is ChaCha20 keyed with
/// `SHA-256("diffsim/noise/v1" ‖ seed_le64 ‖ timestep_le32 [‖ image_hash])`;
/// samples fill the array in row-major order. Passing an image hash gives
/// per-image noise, omitting it gives noise shared by all images.
pub fn sample_noise<D: Dimension>(
    shape: D,
    seed: u64,
    timestep: u32,
    image_hash: Option<&str>,
) -> Array<f32, D> {
    let mut h = Sha256::new();
    h.update(b"diffsim/noise/v1");
    h.update(seed.to_le_bytes());
    h.update(timestep.to_le_bytes());
    if let Some(hash) = image_hash {
        h.update(hash.as_bytes());
    }
    let key: [u8; 32] = h.finalize().into();
    let mut rng = ChaCha20Rng::from_seed(key);
    Array::from_shape_simple_fn(shape, || StandardNormal.sample(&mut rng))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array3};

    #[test]
    fn toy_endpoints_are_exact() {
        let x = array![[0.25f64, -3.0], [7.5, 1e-3]];
        let e = array![[1.0f64, 2.0], [-0.5, 0.125]];
        let s = NoiseSchedule::toy();
        assert_eq!(forward_noise(&x, 0, &e, &s).unwrap(), x);
        assert_eq!(forward_noise(&x, 1000, &e, &s).unwrap(), e);
    }

    #[test]
    fn toy_midpoint() {
        let x = array![0.25f64, -3.0, 7.5];
        let e = array![1.0f64, 2.0, -0.5];
        let out = forward_noise(&x, 500, &e, &NoiseSchedule::toy()).unwrap();
        let h = 0.5f64.sqrt();
        for i in 0..3 {
            assert!((out[i] - (h * x[i] + h * e[i])).abs() < 1e-9);
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let x = array![1.0f32, 2.0];
        let e = array![1.0f32];
        assert!(matches!(forward_noise(&x, 1, &e, &NoiseSchedule::toy()), Err(Error::Shape(_))));
        assert!(forward_noise(&x, 1001, &x, &NoiseSchedule::toy()).is_err());
    }

    #[test]
    fn stable_diffusion_schedule_values() {
        // reference values of diffusers' DDPMScheduler(scaled_linear, 0.00085, 0.012)
        let s = NoiseSchedule::scaled_linear(0.00085, 0.012, 1000);
        assert!((s.alpha_bar(0).unwrap() - 0.99915).abs() < 1e-9);
        assert!((s.alpha_bar(999).unwrap() - 0.004660098513).abs() < 1e-11);
        assert!((s.alpha_bar(500).unwrap() - 0.276332684).abs() < 1e-8);
        assert_eq!(s.alpha_bar(1000).unwrap(), s.alpha_bar(999).unwrap());
    }

    #[test]
    fn noise_is_deterministic_and_keyed() {
        let a = sample_noise(ndarray::Ix3(4, 8, 8), 7, 500, None);
        let b = sample_noise(ndarray::Ix3(4, 8, 8), 7, 500, None);
        assert_eq!(a, b);
        assert_ne!(a, sample_noise(ndarray::Ix3(4, 8, 8), 8, 500, None));
        assert_ne!(a, sample_noise(ndarray::Ix3(4, 8, 8), 7, 400, None));
        assert_ne!(a, sample_noise(ndarray::Ix3(4, 8, 8), 7, 500, Some("abc")));
        let big: Array3<f32> = sample_noise(ndarray::Ix3(4, 64, 64), 1, 1, None);
        let mean = big.mean().unwrap();
        let var = big.mapv(|x| (x - mean).powi(2)).mean().unwrap();
        assert!(mean.abs() < 0.05 && (var - 1.0).abs() < 0.05);
    }
}
