//! Turns command-line flags into a validated MetricConfig and a scorer.

use std::fmt;
use std::fs;

use anyhow::{Context, Result};
use diffsim_backends::{Backend, Registry, Scorer};
use diffsim_core::{AttentionKind, Block, CosineMode, MetricConfig, MetricKind};
use diffsim_eval::datasets::Task;
use diffsim_eval::Format;
use diffsim_store::FeatureStore;

use crate::args::{Attention, Common};

/// Bad input detected by the CLI itself.
#[derive(Debug)]
pub struct Usage(pub String);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

pub const DEFAULT_BACKEND: &str = "sd15";

pub fn registry(common: &Common) -> Registry {
    match &common.weights_dir {
        Some(dir) => Registry::new(Some(dir.clone())),
        None => Registry::from_env(),
    }
}

pub fn store(common: &Common) -> Result<Option<FeatureStore>> {
    Ok(match &common.cache_dir {
        Some(dir) => Some(FeatureStore::open(dir)?),
        None => FeatureStore::from_env()?,
    })
}

pub fn scorer(common: &Common, registry: &Registry) -> Result<Scorer> {
    let scorer = Scorer::new(registry.clone());
    Ok(match store(common)? {
        Some(s) => {
            log::info!("feature cache at {}", s.root().display());
            scorer.with_store(s)
        }
        None => scorer,
    })
}

fn attention(common: &Common) -> AttentionKind {
    match common.attention {
        Some(Attention::Cross) => AttentionKind::Cross,
        _ => AttentionKind::SelfAttn,
    }
}

/// The requested backend, or sd15 when its weights are present and the
/// toy backend of the requested attention kind otherwise.
fn backend_id(common: &Common, registry: &Registry) -> Result<String> {
    if let Some(b) = &common.backend {
        registry.get(b)?;
        return Ok(b.clone());
    }
    let status = registry.get(DEFAULT_BACKEND)?.weights_status();
    if status.is_ready() {
        return Ok(DEFAULT_BACKEND.into());
    }
    let toy = match attention(common) {
        AttentionKind::SelfAttn => "toy-self",
        AttentionKind::Cross => "toy-cross",
    };
    eprintln!(
        "NOTICE: {DEFAULT_BACKEND} weights not found ({} of {} files missing); falling back to the {toy} \
         test backend. Scores are NOT DiffSim scores. Run scripts/fetch_weights.py or pass --backend.",
        status.missing.len(),
        status.files.len().max(status.missing.len()),
    );
    Ok(toy.into())
}

fn metric_kind(backend: &str, kind: AttentionKind) -> Result<MetricKind> {
    let natural = MetricKind::for_backend(backend).ok_or_else(|| usage(format!("unknown backend `{backend}`")))?;
    Ok(match (natural, kind) {
        (k, _) if k.attention_kind() == kind => k,
        (MetricKind::DiffsimS, AttentionKind::Cross) => MetricKind::DiffsimC,
        (k, _) => return Err(usage(format!("backend `{backend}` has no {kind} attention sites ({k} only)"))),
    })
}

fn default_block(backend: &dyn Backend, kind: AttentionKind) -> Result<Block> {
    let sites: Vec<_> = backend.sites().into_iter().filter(|s| s.kind == kind).collect();
    if sites.iter().any(|s| s.block == Block::Up(0)) {
        return Ok(Block::Up(0));
    }
    sites.first().map(|s| s.block).ok_or_else(|| usage(format!("backend `{}` publishes no {kind} sites", backend.id())))
}

/// Resolves the metric flags; `task` picks the default timestep.
pub fn metric_config(common: &Common, registry: &Registry, task: Option<Task>) -> Result<MetricConfig> {
    let config = match &common.config {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            serde_json::from_str(&text).map_err(|e| usage(format!("{}: not a metric config: {e}", path.display())))?
        }
        None => from_flags(common, registry, task)?,
    };
    let backend = registry.get(&config.site.backend_id)?;
    config.validate()?;
    backend.validate_site(&config.site)?;
    log::info!("metric config {}", config.canonical());
    Ok(config)
}

fn from_flags(common: &Common, registry: &Registry, task: Option<Task>) -> Result<MetricConfig> {
    let id = backend_id(common, registry)?;
    let backend = registry.get(&id)?;
    // without --attention, the backend's own kind
    let kind = match (common.attention, MetricKind::for_backend(&id)) {
        (None, Some(natural)) => natural.attention_kind(),
        _ => attention(common),
    };
    let metric_kind = metric_kind(&id, kind)?;
    let block = match &common.block {
        Some(b) => b.parse::<Block>()?,
        None => default_block(backend.as_ref(), kind)?,
    };
    let timestep = if backend.is_diffusion() {
        Some(common.timestep.unwrap_or_else(|| task.unwrap_or(Task::HumanAlign).default_timestep()))
    } else {
        // passed through so the site check can reject it
        common.timestep
    };
    let resolution = common.resolution.unwrap_or_else(|| backend.default_resolution());
    let site = diffsim_core::AttentionSite::new(id, kind, block, common.layer.unwrap_or(0))
        .with_timestep(timestep)
        .with_resolution(resolution);
    let mut config = MetricConfig::new(site, metric_kind);
    config.noise_seed = common.seed.unwrap_or(0);
    config.shared_noise = !common.independent_noise;
    config.crop_subject = common.crop_subject;
    if let Some(mode) = &common.cosine_mode {
        config.cosine_mode = mode.parse::<CosineMode>()?;
    }
    Ok(config)
}

pub fn formats(common: &Common, default: &[Format]) -> Result<Vec<Format>> {
    if common.format.is_empty() {
        return Ok(default.to_vec());
    }
    common.format.iter().map(|f| Ok(f.parse::<Format>()?)).collect()
}

/// Parses `1024`, `500K`, `64M` or `2G`.
pub fn parse_size(s: &str) -> Result<u64> {
    let s = s.trim();
    let (digits, scale) = match s.char_indices().last() {
        Some((i, c)) if c.is_ascii_alphabetic() => {
            let scale = match c.to_ascii_uppercase() {
                'K' => 1u64 << 10,
                'M' => 1 << 20,
                'G' => 1 << 30,
                'B' => 1,
                _ => return Err(usage(format!("bad size `{s}`"))),
            };
            (&s[..i], scale)
        }
        _ => (s, 1),
    };
    let n: f64 = digits.trim().parse().map_err(|_| usage(format!("bad size `{s}`")))?;
    if !(n >= 0.0) {
        return Err(usage(format!("bad size `{s}`")));
    }
    Ok((n * scale as f64) as u64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sizes() {
        assert_eq!(parse_size("1024").unwrap(), 1024);
        assert_eq!(parse_size("2K").unwrap(), 2048);
        assert_eq!(parse_size("1.5m").unwrap(), 3 << 19);
        assert_eq!(parse_size("1G").unwrap(), 1 << 30);
        assert!(parse_size("lots").is_err());
        assert!(parse_size("-1").is_err());
    }

    #[test]
    fn cross_attention_on_a_unet_is_diffsim_c() {
        assert_eq!(metric_kind("sd15", AttentionKind::Cross).unwrap(), MetricKind::DiffsimC);
        assert_eq!(metric_kind("sd15", AttentionKind::SelfAttn).unwrap(), MetricKind::DiffsimS);
        assert!(metric_kind("dinov2", AttentionKind::Cross).is_err());
        assert!(metric_kind("toy-cross", AttentionKind::SelfAttn).is_err());
    }
}
