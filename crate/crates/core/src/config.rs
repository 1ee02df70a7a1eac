use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::site::{AttentionKind, AttentionSite};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    /// U-Net self-attention.
    DiffsimS,
    /// U-Net cross-attention fed with image tokens.
    DiffsimC,
    ClipAas,
    DinoAas,
    ToyAas,
}

impl MetricKind {
    pub const ALL: [MetricKind; 5] = [
        MetricKind::DiffsimS,
        MetricKind::DiffsimC,
        MetricKind::ClipAas,
        MetricKind::DinoAas,
        MetricKind::ToyAas,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            MetricKind::DiffsimS => "diffsim_s",
            MetricKind::DiffsimC => "diffsim_c",
            MetricKind::ClipAas => "clip_aas",
            MetricKind::DinoAas => "dino_aas",
            MetricKind::ToyAas => "toy_aas",
        }
    }

    pub fn attention_kind(self) -> AttentionKind {
        match self {
            MetricKind::DiffsimC => AttentionKind::Cross,
            _ => AttentionKind::SelfAttn,
        }
    }

    /// Backends this metric can run on.
    pub fn backends(self) -> &'static [&'static str] {
        match self {
            MetricKind::DiffsimS => &["sd15", "sdxl", "toy-self"],
            MetricKind::DiffsimC => &["sd15", "sdxl", "toy-cross"],
            MetricKind::ClipAas => &["clip-vit"],
            MetricKind::DinoAas => &["dinov2"],
            MetricKind::ToyAas => &["toy-self"],
        }
    }

    /// The natural metric for a backend id.
    pub fn for_backend(backend_id: &str) -> Option<MetricKind> {
        Some(match backend_id {
            "sd15" | "sdxl" => MetricKind::DiffsimS,
            "clip-vit" => MetricKind::ClipAas,
            "dinov2" => MetricKind::DinoAas,
            "toy-self" => MetricKind::ToyAas,
            "toy-cross" => MetricKind::DiffsimC,
            _ => return None,
        })
    }
}

impl fmt::Display for MetricKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MetricKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MetricKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown metric kind `{s}`")))
    }
}

/// How token-wise aligned features are reduced to one cosine.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CosineMode {
    /// Mean over tokens of the per-token cosine.
    #[default]
    PerTokenMean,
    /// One cosine over the flattened feature matrices.
    Flattened,
}

impl FromStr for CosineMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per_token_mean" => Ok(CosineMode::PerTokenMean),
            "flattened" => Ok(CosineMode::Flattened),
            other => Err(Error::Invalid(format!("unknown cosine mode `{other}`"))),
        }
    }
}

fn default_true() -> bool {
    true
}

/// A fully specified similarity metric.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct MetricConfig {
    pub site: AttentionSite,
    pub metric_kind: MetricKind,
    #[serde(default)]
    pub noise_seed: u64,
    #[serde(default = "default_true")]
    pub shared_noise: bool,
    #[serde(default)]
    pub cosine_mode: CosineMode,
    #[serde(default)]
    pub crop_subject: bool,
}

impl MetricConfig {
    pub fn new(site: AttentionSite, metric_kind: MetricKind) -> Self {
        MetricConfig {
            site,
            metric_kind,
            noise_seed: 0,
            shared_noise: true,
            cosine_mode: CosineMode::PerTokenMean,
            crop_subject: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.site.check()?;
        if self.site.kind != self.metric_kind.attention_kind() {
            return Err(Error::Invalid(format!(
                "{} requires {} attention, site is {}",
                self.metric_kind,
                self.metric_kind.attention_kind(),
                self.site.kind
            )));
        }
        if !self.metric_kind.backends().contains(&self.site.backend_id.as_str()) {
            return Err(Error::Invalid(format!(
                "{} cannot run on backend `{}`",
                self.metric_kind, self.site.backend_id
            )));
        }
        Ok(())
    }

    /// Canonical string used for ordering and tie-breaks.
    pub fn canonical(&self) -> String {
        format!(
            "{}|{}|seed={}|shared={}|cos={}|crop={}",
            self.metric_kind,
            self.site.canonical(),
            self.noise_seed,
            self.shared_noise,
            match self.cosine_mode {
                CosineMode::PerTokenMean => "per_token_mean",
                CosineMode::Flattened => "flattened",
            },
            self.crop_subject
        )
    }
}
