//! Top-k retrieval by exhaustive pairwise scoring over cached projections.

use std::fs;
use std::path::{Path, PathBuf};

use diffsim_backends::{score_latents, Scorer, SourceImage};
use diffsim_core::MetricConfig;
use image::{imageops, Rgb, RgbImage};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datasets::DatasetManifest;
use crate::error::{Error, Result};

/// Neighbours returned when no k is given.
pub const DEFAULT_K: usize = 4;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusItem {
    pub id: String,
    pub path: PathBuf,
}

impl CorpusItem {
    pub fn new(id: impl Into<String>, path: impl Into<PathBuf>) -> Self {
        CorpusItem { id: id.into(), path: path.into() }
    }

    fn open(&self) -> Result<SourceImage> {
        SourceImage::open(&self.path).map_err(|e| Error::from(e).in_item(&self.id))
    }
}

#[derive(Deserialize)]
struct RawCorpus {
    items: Vec<CorpusItem>,
}

pub fn corpus_from_manifest(manifest: &DatasetManifest) -> Vec<CorpusItem> {
    manifest.items.iter().map(|i| CorpusItem::new(i.id.clone(), i.path.clone())).collect()
}

/// Reads any manifest-shaped JSON file; only `items[].id` and
/// `items[].path` are used. Paths resolve against the file's directory.
pub fn load_corpus(path: &Path) -> Result<Vec<CorpusItem>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let raw: RawCorpus =
        serde_json::from_str(&text).map_err(|e| Error::Parse { path: path.to_path_buf(), reason: e.to_string() })?;
    let root = path.parent().unwrap_or(Path::new("."));
    let mut seen = std::collections::HashSet::new();
    raw.items
        .into_iter()
        .map(|mut item| {
            if !seen.insert(item.id.clone()) {
                return Err(Error::DuplicateId(item.id));
            }
            item.path = root.join(&item.path);
            if !item.path.is_file() {
                return Err(Error::DanglingPath { id: item.id, path: item.path });
            }
            Ok(item)
        })
        .collect()
}

/// Projects every corpus image into the scorer's feature store and
/// returns the number of forward passes this took (zero when everything
/// was cached already).
pub fn precompute_corpus(scorer: &Scorer, config: &MetricConfig, corpus: &[CorpusItem]) -> Result<u64> {
    if scorer.store().is_none() {
        return Err(Error::Config("precomputing a corpus needs a feature store".into()));
    }
    scorer.validate(config)?;
    let before = scorer.extractions();
    corpus.par_iter().try_for_each(|item| {
        scorer.latents(config, &item.open()?).map_err(|e| Error::from(e).in_item(&item.id))?;
        Ok::<_, Error>(())
    })?;
    Ok(scorer.extractions() - before)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedItem {
    pub id: String,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ranking {
    pub query: String,
    pub config: MetricConfig,
    pub k: usize,
    pub results: Vec<RankedItem>,
    /// Set when fewer than `k` candidates were available.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
}

fn same_file(a: &Path, b: &Path) -> bool {
    match (a.canonicalize(), b.canonicalize()) {
        (Ok(a), Ok(b)) => a == b,
        _ => a == b,
    }
}

/// Scores the query against every corpus image and keeps the `k` best,
/// by descending score and then ascending id. With `exclude_query`, corpus
/// entries with the query's id or file are skipped.
pub fn query_topk(
    scorer: &Scorer,
    config: &MetricConfig,
    query: &CorpusItem,
    corpus: &[CorpusItem],
    k: usize,
    exclude_query: bool,
) -> Result<Ranking> {
    if k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    if corpus.is_empty() {
        return Err(Error::Config("empty corpus".into()));
    }
    scorer.validate(config)?;
    let q = scorer.latents(config, &query.open()?).map_err(|e| Error::from(e).in_item(&query.id))?;
    let candidates: Vec<&CorpusItem> = corpus
        .iter()
        .filter(|c| !exclude_query || (c.id != query.id && !same_file(&c.path, &query.path)))
        .collect();
    let mut results = candidates
        .par_iter()
        .map(|c| {
            let l = scorer.latents(config, &c.open()?).map_err(|e| Error::from(e).in_item(&c.id))?;
            Ok(RankedItem { id: c.id.clone(), score: score_latents(config, &q, &l)?.value })
        })
        .collect::<Result<Vec<_>>>()?;
    results.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.id.cmp(&b.id)));
    let warning = (k > results.len())
        .then(|| format!("k = {k} exceeds the {} candidates; returning the full ranking", results.len()));
    if let Some(w) = &warning {
        log::warn!("{w}");
    }
    results.truncate(k);
    Ok(Ranking { query: query.id.clone(), config: config.clone(), k, results, warning })
}

fn square_thumb(img: &RgbImage, size: u32) -> RgbImage {
    let side = img.width().min(img.height());
    let (x, y) = ((img.width() - side) / 2, (img.height() - side) / 2);
    let square = imageops::crop_imm(img, x, y, side, side).to_image();
    imageops::resize(&square, size, size, imageops::FilterType::Triangle)
}

/// The query followed by its ranked neighbours in one row.
pub fn contact_sheet(query: &CorpusItem, ranking: &Ranking, corpus: &[CorpusItem], thumb: u32) -> Result<RgbImage> {
    let gap = thumb / 8;
    let n = ranking.results.len() as u32 + 1;
    let mut sheet = RgbImage::from_pixel(n * thumb + (n + 1) * gap + gap, thumb + 2 * gap, Rgb([255, 255, 255]));
    let mut x = gap;
    let mut items = vec![query];
    for r in &ranking.results {
        items.push(corpus.iter().find(|c| c.id == r.id).ok_or_else(|| Error::UnknownImage(r.id.clone()))?);
    }
    for (i, item) in items.into_iter().enumerate() {
        let img = item.open()?;
        imageops::replace(&mut sheet, &square_thumb(img.pixels(), thumb), i64::from(x), i64::from(gap));
        // extra space after the query
        x += thumb + gap + if i == 0 { gap } else { 0 };
    }
    Ok(sheet)
}
