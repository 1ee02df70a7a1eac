//! Aligned attention score and the bidirectional similarity built on it.

use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};

use crate::attention::multihead_align;
use crate::config::{CosineMode, MetricConfig};
use crate::error::{Error, Result};
use crate::latents::ProjectedLatents;

/// Bidirectional similarity of two images at one site.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityScore {
    /// `(aas_ab + aas_ba) / 2`.
    pub value: f64,
    pub aas_ab: f64,
    pub aas_ba: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<MetricConfig>,
}

impl SimilarityScore {
    pub fn from_directions(aas_ab: f64, aas_ba: f64) -> Self {
        SimilarityScore {
            value: 0.5 * (aas_ab + aas_ba),
            aas_ab,
            aas_ba,
            config: None,
        }
    }

    pub fn with_config(mut self, config: MetricConfig) -> Self {
        self.config = Some(config);
        self
    }
}

fn check_same_shape(x: &Array2<f64>, y: &Array2<f64>) -> Result<()> {
    if x.dim() != y.dim() {
        return Err(Error::Dimension(format!("cosine operands {:?} vs {:?}", x.dim(), y.dim())));
    }
    if x.nrows() == 0 || x.ncols() == 0 {
        return Err(Error::Dimension("cosine of empty matrices".into()));
    }
    Ok(())
}

/// Mean over rows of `cos(x_i, y_i)`.
pub fn token_cosine(x: &Array2<f64>, y: &Array2<f64>) -> Result<f64> {
    check_same_shape(x, y)?;
    let mut total = 0.0;
    for (i, (xr, yr)) in x.rows().into_iter().zip(y.rows()).enumerate() {
        let (mut dot, mut xx, mut yy) = (0.0, 0.0, 0.0);
        Zip::from(&xr).and(&yr).for_each(|&a, &b| {
            dot += a * b;
            xx += a * a;
            yy += b * b;
        });
        if xx == 0.0 {
            return Err(Error::DegenerateFeature { operand: "x", row: i });
        }
        if yy == 0.0 {
            return Err(Error::DegenerateFeature { operand: "y", row: i });
        }
        total += (dot / (xx.sqrt() * yy.sqrt())).clamp(-1.0, 1.0);
    }
    Ok(total / x.nrows() as f64)
}

/// Cosine of the two matrices viewed as flat vectors.
pub fn flattened_cosine(x: &Array2<f64>, y: &Array2<f64>) -> Result<f64> {
    check_same_shape(x, y)?;
    let dot: f64 = Zip::from(x).and(y).fold(0.0, |acc, &a, &b| acc + a * b);
    let xx: f64 = x.iter().map(|a| a * a).sum();
    let yy: f64 = y.iter().map(|b| b * b).sum();
    if xx == 0.0 {
        return Err(Error::DegenerateFeature { operand: "x", row: 0 });
    }
    if yy == 0.0 {
        return Err(Error::DegenerateFeature { operand: "y", row: 0 });
    }
    Ok((dot / (xx.sqrt() * yy.sqrt())).clamp(-1.0, 1.0))
}

pub fn cosine(x: &Array2<f64>, y: &Array2<f64>, mode: CosineMode) -> Result<f64> {
    match mode {
        CosineMode::PerTokenMean => token_cosine(x, y),
        CosineMode::Flattened => flattened_cosine(x, y),
    }
}

/// `cos(attn(Q_a, K_a, V_a), attn(Q_a, K_b, V_b))` with per-token cosine.
pub fn aas(a: &ProjectedLatents, b: &ProjectedLatents) -> Result<f64> {
    aas_with_mode(a, b, CosineMode::PerTokenMean)
}

pub fn aas_with_mode(a: &ProjectedLatents, b: &ProjectedLatents, mode: CosineMode) -> Result<f64> {
    let own = multihead_align(a, a)?;
    let other = multihead_align(a, b)?;
    cosine(&own.x, &other.x, mode)
}

/// `½ (AAS(a, b) + AAS(b, a))`.
pub fn similarity(a: &ProjectedLatents, b: &ProjectedLatents) -> Result<SimilarityScore> {
    similarity_with_mode(a, b, CosineMode::PerTokenMean)
}

pub fn similarity_with_mode(
    a: &ProjectedLatents,
    b: &ProjectedLatents,
    mode: CosineMode,
) -> Result<SimilarityScore> {
    let ab = aas_with_mode(a, b, mode)?;
    let ba = aas_with_mode(b, a, mode)?;
    Ok(SimilarityScore::from_directions(ab, ba))
}

/// Cross-attention variant: queries come from each image's U-Net latents
/// (`z_*`), keys and values from the image-token projections (`ip_*`).
/// Only `z.q` and `ip.k`/`ip.v` are read.
pub fn cross_aas_pair(
    z_a: &ProjectedLatents,
    ip_a: &ProjectedLatents,
    z_b: &ProjectedLatents,
    ip_b: &ProjectedLatents,
) -> Result<SimilarityScore> {
    cross_aas_pair_with_mode(z_a, ip_a, z_b, ip_b, CosineMode::PerTokenMean)
}

pub fn cross_aas_pair_with_mode(
    z_a: &ProjectedLatents,
    ip_a: &ProjectedLatents,
    z_b: &ProjectedLatents,
    ip_b: &ProjectedLatents,
    mode: CosineMode,
) -> Result<SimilarityScore> {
    let la = z_a.with_kv_of(ip_a)?;
    let lb = z_b.with_kv_of(ip_b)?;
    similarity_with_mode(&la, &lb, mode)
}
