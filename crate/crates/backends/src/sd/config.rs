use std::path::Path;

use serde::Deserialize;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(untagged)]
pub enum OneOrMany {
    One(usize),
    Many(Vec<usize>),
}

impl OneOrMany {
    pub fn expand(&self, n: usize) -> Vec<usize> {
        match self {
            OneOrMany::One(v) => vec![*v; n],
            OneOrMany::Many(v) => v.clone(),
        }
    }
}

fn one() -> OneOrMany {
    OneOrMany::One(1)
}

fn groups() -> usize {
    32
}

fn norm_eps() -> f32 {
    1e-5
}

fn yes() -> bool {
    true
}

/// The subset of a diffusers `UNet2DConditionModel` config that shapes
/// the forward pass.
#[derive(Clone, Debug, PartialEq, Deserialize)]
pub struct UNetConfig {
    pub block_out_channels: Vec<usize>,
    pub down_block_types: Vec<String>,
    pub up_block_types: Vec<String>,
    pub layers_per_block: OneOrMany,
    pub attention_head_dim: OneOrMany,
    #[serde(default)]
    pub num_attention_heads: Option<OneOrMany>,
    #[serde(default = "one")]
    pub transformer_layers_per_block: OneOrMany,
    #[serde(default)]
    pub use_linear_projection: bool,
    #[serde(default = "groups")]
    pub norm_num_groups: usize,
    #[serde(default = "norm_eps")]
    pub norm_eps: f32,
    #[serde(default = "yes")]
    pub flip_sin_to_cos: bool,
    #[serde(default)]
    pub freq_shift: f32,
    #[serde(default)]
    pub addition_embed_type: Option<String>,
    #[serde(default)]
    pub addition_time_embed_dim: Option<usize>,
    #[serde(default)]
    pub mid_block_type: Option<String>,
    #[serde(default = "cross_dim")]
    pub cross_attention_dim: usize,
}

fn cross_dim() -> usize {
    768
}

impl UNetConfig {
    pub fn sd15() -> Self {
        serde_json::from_str(
            r#"{
                "block_out_channels": [320, 640, 1280, 1280],
                "down_block_types": ["CrossAttnDownBlock2D", "CrossAttnDownBlock2D", "CrossAttnDownBlock2D", "DownBlock2D"],
                "up_block_types": ["UpBlock2D", "CrossAttnUpBlock2D", "CrossAttnUpBlock2D", "CrossAttnUpBlock2D"],
                "layers_per_block": 2,
                "attention_head_dim": 8
            }"#,
        )
        .expect("builtin config")
    }

    pub fn sdxl() -> Self {
        serde_json::from_str(
            r#"{
                "block_out_channels": [320, 640, 1280],
                "down_block_types": ["DownBlock2D", "CrossAttnDownBlock2D", "CrossAttnDownBlock2D"],
                "up_block_types": ["CrossAttnUpBlock2D", "CrossAttnUpBlock2D", "UpBlock2D"],
                "layers_per_block": 2,
                "attention_head_dim": [5, 10, 20],
                "transformer_layers_per_block": [1, 2, 10],
                "use_linear_projection": true,
                "addition_embed_type": "text_time",
                "addition_time_embed_dim": 256,
                "cross_attention_dim": 2048
            }"#,
        )
        .expect("builtin config")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Weights { path: path.into(), reason: e.to_string() })?;
        let c: UNetConfig =
            serde_json::from_str(&text).map_err(|e| Error::Weights { path: path.into(), reason: e.to_string() })?;
        c.check().map_err(|reason| Error::Weights { path: path.into(), reason })?;
        Ok(c)
    }

    fn check(&self) -> std::result::Result<(), String> {
        let n = self.block_out_channels.len();
        if n == 0 || self.down_block_types.len() != n || self.up_block_types.len() != n {
            return Err("block lists disagree in length".into());
        }
        for v in [&self.layers_per_block, &self.attention_head_dim, &self.transformer_layers_per_block] {
            if v.expand(n).len() != n {
                return Err("per-block list has the wrong length".into());
            }
        }
        for t in self.down_block_types.iter().chain(&self.up_block_types) {
            if !matches!(t.as_str(), "CrossAttnDownBlock2D" | "DownBlock2D" | "CrossAttnUpBlock2D" | "UpBlock2D") {
                return Err(format!("unsupported block type {t}"));
            }
        }
        if let Some(m) = &self.mid_block_type {
            if m != "UNetMidBlock2DCrossAttn" {
                return Err(format!("unsupported mid block {m}"));
            }
        }
        Ok(())
    }

    pub fn n_blocks(&self) -> usize {
        self.block_out_channels.len()
    }

    /// Heads per down block (diffusers reads `attention_head_dim` as the
    /// head count when `num_attention_heads` is unset).
    pub fn heads(&self) -> Vec<usize> {
        self.num_attention_heads.as_ref().unwrap_or(&self.attention_head_dim).expand(self.n_blocks())
    }

    pub fn layers(&self) -> Vec<usize> {
        self.layers_per_block.expand(self.n_blocks())
    }

    pub fn depths(&self) -> Vec<usize> {
        self.transformer_layers_per_block.expand(self.n_blocks())
    }

    pub fn down_has_attention(&self, i: usize) -> bool {
        self.down_block_types[i].starts_with("CrossAttn")
    }

    pub fn up_has_attention(&self, i: usize) -> bool {
        self.up_block_types[i].starts_with("CrossAttn")
    }
}

fn scaling() -> f32 {
    0.18215
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
pub struct VaeConfig {
    pub block_out_channels: Vec<usize>,
    #[serde(default = "two")]
    pub layers_per_block: usize,
    #[serde(default = "groups")]
    pub norm_num_groups: usize,
    #[serde(default = "scaling")]
    pub scaling_factor: f32,
}

fn two() -> usize {
    2
}

impl VaeConfig {
    pub fn with_scaling(scaling_factor: f32) -> Self {
        VaeConfig { block_out_channels: vec![128, 256, 512, 512], layers_per_block: 2, norm_num_groups: 32, scaling_factor }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Weights { path: path.into(), reason: e.to_string() })?;
        serde_json::from_str(&text).map_err(|e| Error::Weights { path: path.into(), reason: e.to_string() })
    }
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
pub struct SchedulerConfig {
    #[serde(default = "beta_start")]
    pub beta_start: f64,
    #[serde(default = "beta_end")]
    pub beta_end: f64,
    #[serde(default = "beta_schedule")]
    pub beta_schedule: String,
    #[serde(default = "train_steps")]
    pub num_train_timesteps: usize,
}

fn beta_start() -> f64 {
    0.00085
}

fn beta_end() -> f64 {
    0.012
}

fn beta_schedule() -> String {
    "scaled_linear".into()
}

fn train_steps() -> usize {
    1000
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults")
    }
}

impl SchedulerConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Weights { path: path.into(), reason: e.to_string() })?;
        serde_json::from_str(&text).map_err(|e| Error::Weights { path: path.into(), reason: e.to_string() })
    }

    pub fn schedule(&self) -> Result<crate::schedule::NoiseSchedule> {
        use crate::schedule::NoiseSchedule;
        match self.beta_schedule.as_str() {
            "scaled_linear" => Ok(NoiseSchedule::scaled_linear(self.beta_start, self.beta_end, self.num_train_timesteps)),
            "linear" => Ok(NoiseSchedule::linear_betas(self.beta_start, self.beta_end, self.num_train_timesteps)),
            other => Err(Error::InvalidConfig(format!("unsupported beta schedule `{other}`"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_configs() {
        let c = UNetConfig::sd15();
        assert_eq!(c.heads(), vec![8; 4]);
        assert_eq!(c.depths(), vec![1; 4]);
        assert!(c.down_has_attention(2) && !c.down_has_attention(3));
        let x = UNetConfig::sdxl();
        assert_eq!(x.heads(), vec![5, 10, 20]);
        assert!(x.up_has_attention(0) && !x.up_has_attention(2));
        assert_eq!(SchedulerConfig::default().num_train_timesteps, 1000);
    }
}
