//! Addresses of attention layers inside a backbone.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// Number of training timesteps of the diffusion backbones.
pub const TOTAL_TIMESTEPS: u32 = 1000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AttentionKind {
    #[serde(rename = "self")]
    SelfAttn,
    #[serde(rename = "cross")]
    Cross,
}

impl AttentionKind {
    pub fn as_str(self) -> &'static str {
        match self {
            AttentionKind::SelfAttn => "self",
            AttentionKind::Cross => "cross",
        }
    }
}

impl fmt::Display for AttentionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AttentionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "self" => Ok(AttentionKind::SelfAttn),
            "cross" => Ok(AttentionKind::Cross),
            other => Err(Error::Invalid(format!("unknown attention kind `{other}`"))),
        }
    }
}

/// A block of a U-Net (`down_0`, `mid`, `up_1`, ...) or a flat layer index of
/// a transformer encoder (`layer_7`).
///
/// U-Net down/up indices count only the blocks that carry attention, in
/// forward order, so `up_0` is the first attention-bearing decoder block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Block {
    Down(u8),
    Mid,
    Up(u8),
    Layer(u32),
}

impl fmt::Display for Block {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Block::Down(i) => write!(f, "down_{i}"),
            Block::Mid => f.write_str("mid"),
            Block::Up(i) => write!(f, "up_{i}"),
            Block::Layer(i) => write!(f, "layer_{i}"),
        }
    }
}

impl FromStr for Block {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Invalid(format!("unknown block `{s}`"));
        if s == "mid" {
            return Ok(Block::Mid);
        }
        // a bare integer is accepted as a transformer layer index
        if let Ok(i) = s.parse::<u32>() {
            return Ok(Block::Layer(i));
        }
        let (prefix, idx) = s.rsplit_once('_').ok_or_else(bad)?;
        match prefix {
            "down" => idx.parse().map(Block::Down).map_err(|_| bad()),
            "up" => idx.parse().map(Block::Up).map_err(|_| bad()),
            "layer" => idx.parse().map(Block::Layer).map_err(|_| bad()),
            _ => Err(bad()),
        }
    }
}

impl Serialize for Block {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Block {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Where projections are captured: backbone, layer and (for diffusion
/// backbones) the denoising timestep, plus the square input resolution.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct AttentionSite {
    pub backend_id: String,
    pub kind: AttentionKind,
    pub block: Block,
    pub layer_ordinal: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timestep: Option<u32>,
    pub resolution: u32,
}

impl AttentionSite {
    pub fn new(backend_id: impl Into<String>, kind: AttentionKind, block: Block, layer_ordinal: u32) -> Self {
        AttentionSite {
            backend_id: backend_id.into(),
            kind,
            block,
            layer_ordinal,
            timestep: None,
            resolution: 512,
        }
    }

    pub fn with_timestep(mut self, t: Option<u32>) -> Self {
        self.timestep = t;
        self
    }

    pub fn with_resolution(mut self, resolution: u32) -> Self {
        self.resolution = resolution;
        self
    }

    /// Same layer, ignoring timestep and resolution.
    pub fn same_layer(&self, other: &AttentionSite) -> bool {
        self.backend_id == other.backend_id
            && self.kind == other.kind
            && self.block == other.block
            && self.layer_ordinal == other.layer_ordinal
    }

    /// Structural checks that need no knowledge of the backend.
    pub fn check(&self) -> Result<()> {
        if self.backend_id.is_empty()
            || !self
                .backend_id
                .chars()
                .all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == '-' || c == '_' || c == '.')
        {
            return Err(Error::Invalid(format!("malformed backend id `{}`", self.backend_id)));
        }
        if let Some(t) = self.timestep {
            if t > TOTAL_TIMESTEPS {
                return Err(Error::Invalid(format!(
                    "timestep {t} outside [0, {TOTAL_TIMESTEPS}]"
                )));
            }
        }
        if self.resolution == 0 {
            return Err(Error::Invalid("resolution must be positive".into()));
        }
        Ok(())
    }

    /// Canonical, injective string form, e.g. `sd15:self:up_0:1:t900:r512`.
    pub fn canonical(&self) -> String {
        let t = match self.timestep {
            Some(t) => format!("t{t}"),
            None => "t-".to_string(),
        };
        format!(
            "{}:{}:{}:{}:{}:r{}",
            self.backend_id, self.kind, self.block, self.layer_ordinal, t, self.resolution
        )
    }
}

impl fmt::Display for AttentionSite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.canonical())
    }
}

impl FromStr for AttentionSite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').collect();
        let bad = || Error::Invalid(format!("malformed site string `{s}`"));
        if parts.len() != 6 {
            return Err(bad());
        }
        let timestep = match parts[4].strip_prefix('t').ok_or_else(bad)? {
            "-" => None,
            t => Some(t.parse().map_err(|_| bad())?),
        };
        let resolution = parts[5]
            .strip_prefix('r')
            .ok_or_else(bad)?
            .parse()
            .map_err(|_| bad())?;
        let site = AttentionSite {
            backend_id: parts[0].to_string(),
            kind: parts[1].parse()?,
            block: parts[2].parse()?,
            layer_ordinal: parts[3].parse().map_err(|_| bad())?,
            timestep,
            resolution,
        };
        site.check()?;
        Ok(site)
    }
}
