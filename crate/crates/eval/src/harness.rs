//! Two-alternative forced choice evaluation, grid search, majority-vote
//! ensembles and video consistency.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use diffsim_backends::{score_latents, Backend, Scorer, SourceImage};
use diffsim_core::{MetricConfig, MetricKind};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datasets::{Benchmark, DatasetManifest, TripletRecord};
use crate::error::{Error, Result};
use crate::report::Environment;

/// Version of the report JSON layout.
pub const REPORT_VERSION: u32 = 1;

/// Diffusion timesteps swept by the default grid.
pub const GRID_TIMESTEPS: [u32; 9] = [100, 200, 300, 400, 500, 600, 700, 800, 900];

/// A pairwise similarity; higher means more similar.
pub trait PairMetric: Sync {
    fn label(&self) -> String;

    fn config(&self) -> Option<&MetricConfig> {
        None
    }

    fn pair_score(&self, a: &str, b: &str) -> Result<f64>;

    /// Scores of both candidates against the reference.
    fn triplet_scores(&self, t: &TripletRecord) -> Result<[f64; 2]> {
        Ok([self.pair_score(&t.reference, &t.cand[0])?, self.pair_score(&t.reference, &t.cand[1])?])
    }
}

/// A metric from a closure, for scores computed elsewhere.
pub struct FnMetric<F> {
    label: String,
    f: F,
}

impl<F: Fn(&str, &str) -> Result<f64> + Sync> FnMetric<F> {
    pub fn new(label: impl Into<String>, f: F) -> Self {
        FnMetric { label: label.into(), f }
    }
}

impl<F: Fn(&str, &str) -> Result<f64> + Sync> PairMetric for FnMetric<F> {
    fn label(&self) -> String {
        self.label.clone()
    }

    fn pair_score(&self, a: &str, b: &str) -> Result<f64> {
        (self.f)(a, b)
    }
}

/// Maps image ids to files: an explicit table, falling back to paths
/// relative to a root directory.
#[derive(Clone, Debug, Default)]
pub struct ImageTable {
    paths: BTreeMap<String, PathBuf>,
    root: Option<PathBuf>,
}

impl ImageTable {
    pub fn from_manifest(manifest: &DatasetManifest) -> Self {
        ImageTable { paths: manifest.paths(), root: None }
    }

    pub fn from_paths(paths: BTreeMap<String, PathBuf>) -> Self {
        ImageTable { paths, root: None }
    }

    /// Ids not in the table are read as paths under `root`.
    pub fn with_root(mut self, root: impl Into<PathBuf>) -> Self {
        self.root = Some(root.into());
        self
    }

    pub fn path(&self, id: &str) -> Result<PathBuf> {
        if let Some(p) = self.paths.get(id) {
            return Ok(p.clone());
        }
        match &self.root {
            Some(root) => Ok(root.join(id)),
            None => Err(Error::UnknownImage(id.to_string())),
        }
    }

    pub fn open(&self, id: &str) -> Result<SourceImage> {
        Ok(SourceImage::open(self.path(id)?)?)
    }
}

/// DiffSim (or any attention-alignment metric) at one configuration.
pub struct DiffSimMetric {
    scorer: Scorer,
    config: MetricConfig,
    images: ImageTable,
}

impl DiffSimMetric {
    pub fn new(scorer: Scorer, config: MetricConfig, images: ImageTable) -> Result<Self> {
        scorer.validate(&config)?;
        Ok(DiffSimMetric { scorer, config, images })
    }

    pub fn scorer(&self) -> &Scorer {
        &self.scorer
    }
}

impl PairMetric for DiffSimMetric {
    fn label(&self) -> String {
        self.config.canonical()
    }

    fn config(&self) -> Option<&MetricConfig> {
        Some(&self.config)
    }

    fn pair_score(&self, a: &str, b: &str) -> Result<f64> {
        let (a, b) = (self.images.open(a)?, self.images.open(b)?);
        Ok(self.scorer.score(&self.config, &a, &b)?.value)
    }

    /// The reference is projected once for both candidates.
    fn triplet_scores(&self, t: &TripletRecord) -> Result<[f64; 2]> {
        let r = self.scorer.latents(&self.config, &self.images.open(&t.reference)?)?;
        let mut out = [0.0; 2];
        for (s, id) in out.iter_mut().zip(&t.cand) {
            let c = self.scorer.latents(&self.config, &self.images.open(id)?)?;
            *s = score_latents(&self.config, &r, &c)?.value;
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TripletOutcome {
    pub id: String,
    pub score0: f64,
    pub score1: f64,
    /// `None` on an exact tie.
    pub choice: Option<u8>,
    pub gt_index: u8,
    pub correct: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridEntry {
    pub canonical: String,
    pub config: MetricConfig,
    pub accuracy: f64,
    pub n_correct: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub schema_version: u32,
    /// `None` when the triplets mix benchmarks.
    pub benchmark: Option<Benchmark>,
    pub metric: String,
    pub config: Option<MetricConfig>,
    pub accuracy: f64,
    pub n_correct: usize,
    pub n_triplets: usize,
    pub per_triplet: Vec<TripletOutcome>,
    /// Every evaluated configuration of a grid search, in canonical order.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid_table: Option<Vec<GridEntry>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub environment: Option<Environment>,
}

impl BenchmarkReport {
    fn new(metric: String, config: Option<MetricConfig>, triplets: &[TripletRecord], per_triplet: Vec<TripletOutcome>) -> Self {
        let benchmark = triplets.first().map(|t| t.benchmark).filter(|b| triplets.iter().all(|t| t.benchmark == *b));
        let n_correct = per_triplet.iter().filter(|o| o.correct).count();
        let n_triplets = per_triplet.len();
        BenchmarkReport {
            schema_version: REPORT_VERSION,
            benchmark,
            metric,
            config,
            accuracy: n_correct as f64 / n_triplets as f64,
            n_correct,
            n_triplets,
            per_triplet,
            grid_table: None,
            environment: None,
        }
    }

    /// Choice per triplet id.
    pub fn choices(&self) -> BTreeMap<String, Option<u8>> {
        self.per_triplet.iter().map(|o| (o.id.clone(), o.choice)).collect()
    }
}

/// The higher score wins; exact ties (and NaN) pick nothing.
pub fn choose(score0: f64, score1: f64) -> Option<u8> {
    if score0 > score1 {
        Some(0)
    } else if score1 > score0 {
        Some(1)
    } else {
        None
    }
}

fn check_triplets(triplets: &[TripletRecord]) -> Result<()> {
    if triplets.is_empty() {
        return Err(Error::Config("no triplets to evaluate".into()));
    }
    triplets.iter().try_for_each(TripletRecord::check)
}

/// 2AFC accuracy of `metric`. Triplets are scored in parallel; outcomes
/// keep the input order. A tie counts as incorrect, and any scoring error
/// aborts the evaluation.
pub fn evaluate_triplets(metric: &dyn PairMetric, triplets: &[TripletRecord]) -> Result<BenchmarkReport> {
    check_triplets(triplets)?;
    let per_triplet = triplets
        .par_iter()
        .map(|t| {
            let [score0, score1] = metric.triplet_scores(t).map_err(|e| e.in_triplet(&t.id))?;
            let choice = choose(score0, score1);
            Ok(TripletOutcome {
                id: t.id.clone(),
                score0,
                score1,
                choice,
                gt_index: t.gt_index,
                correct: choice == Some(t.gt_index),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(BenchmarkReport::new(metric.label(), metric.config().cloned(), triplets, per_triplet))
}

/// Evaluates every config and returns the best one's report together with
/// the full grid table. Equal accuracies go to the smallest canonical
/// config string.
pub fn grid_search<M, F>(
    metric_kind: MetricKind,
    grid: &[MetricConfig],
    triplets: &[TripletRecord],
    make: F,
) -> Result<BenchmarkReport>
where
    M: PairMetric,
    F: Fn(&MetricConfig) -> Result<M>,
{
    if grid.is_empty() {
        return Err(Error::Config("empty grid".into()));
    }
    if let Some(c) = grid.iter().find(|c| c.metric_kind != metric_kind) {
        return Err(Error::Config(format!("grid entry {} is not a {metric_kind} config", c.canonical())));
    }
    check_triplets(triplets)?;
    let mut grid: Vec<&MetricConfig> = grid.iter().collect();
    grid.sort_by_cached_key(|c| c.canonical());
    grid.dedup();
    let mut best: Option<BenchmarkReport> = None;
    let mut table = Vec::with_capacity(grid.len());
    for config in grid {
        let mut report = evaluate_triplets(&make(config)?, triplets)?;
        report.config = Some(config.clone());
        log::info!("{}: {}/{}", config.canonical(), report.n_correct, report.n_triplets);
        table.push(GridEntry {
            canonical: config.canonical(),
            config: config.clone(),
            accuracy: report.accuracy,
            n_correct: report.n_correct,
        });
        // canonical order makes the first of equals the winner
        if best.as_ref().map_or(true, |b| report.n_correct > b.n_correct) {
            best = Some(report);
        }
    }
    let mut best = best.expect("nonempty grid");
    best.grid_table = Some(table);
    Ok(best)
}

/// All published sites of `backend` for `metric_kind`, crossed with the
/// timestep sweep (diffusion backends only) and `resolutions`.
pub fn default_grid(
    metric_kind: MetricKind,
    backend: &dyn Backend,
    resolutions: &[u32],
    noise_seed: u64,
) -> Vec<MetricConfig> {
    let timesteps: Vec<Option<u32>> =
        if backend.is_diffusion() { GRID_TIMESTEPS.iter().map(|&t| Some(t)).collect() } else { vec![None] };
    let mut grid = Vec::new();
    for site in backend.sites().into_iter().filter(|s| s.kind == metric_kind.attention_kind()) {
        for &t in &timesteps {
            for &r in resolutions {
                let mut c = MetricConfig::new(site.clone().with_timestep(t).with_resolution(r), metric_kind);
                c.noise_seed = noise_seed;
                grid.push(c);
            }
        }
    }
    grid.sort_by_cached_key(|c| c.canonical());
    grid
}

/// Majority over an odd number (at least three) of binary votes.
pub fn ensemble_vote(choices: &[u8]) -> Result<u8> {
    if choices.len() < 3 || choices.len() % 2 == 0 {
        return Err(Error::Config(format!(
            "majority vote needs an odd number of at least 3 voters, got {}",
            choices.len()
        )));
    }
    if let Some(c) = choices.iter().find(|&&c| c > 1) {
        return Err(Error::Config(format!("choice {c} is not 0 or 1")));
    }
    let ones = choices.iter().filter(|&&c| c == 1).count();
    Ok(u8::from(2 * ones > choices.len()))
}

/// One voter's per-triplet choices; `None` marks a tie.
#[derive(Clone, Debug, PartialEq)]
pub struct ChoiceSet {
    pub name: String,
    pub choices: BTreeMap<String, Option<u8>>,
}

#[derive(Serialize, Deserialize)]
struct ChoiceLine {
    id: String,
    choice: Option<u8>,
}

impl ChoiceSet {
    pub fn from_report(report: &BenchmarkReport) -> Self {
        ChoiceSet { name: report.metric.clone(), choices: report.choices() }
    }

    /// Parses `{"id": ..., "choice": 0 | 1 | null}` lines.
    pub fn parse(name: impl Into<String>, text: &str) -> Result<Self> {
        let mut choices = BTreeMap::new();
        for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let c: ChoiceLine = serde_json::from_str(line)
                .map_err(|e| Error::schema(format!("line {}", n + 1), e.to_string()))?;
            if c.choice.is_some_and(|c| c > 1) {
                return Err(Error::schema(format!("line {}", n + 1), "choice must be 0, 1 or null"));
            }
            if choices.insert(c.id.clone(), c.choice).is_some() {
                return Err(Error::schema(format!("line {}", n + 1), format!("triplet `{}` repeated", c.id)));
            }
        }
        Ok(ChoiceSet { name: name.into(), choices })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(path.display().to_string(), &text)
    }

    pub fn to_jsonl(&self) -> String {
        let lines: Vec<ChoiceLine> =
            self.choices.iter().map(|(id, &choice)| ChoiceLine { id: id.clone(), choice }).collect();
        crate::datasets::write_jsonl(&lines)
    }
}

/// Majority vote of several voters on every triplet. A voter's tie is a
/// vote for the wrong candidate, matching how ties are scored alone.
/// The outcome scores are the vote counts for each candidate.
pub fn ensemble_choices(voters: &[ChoiceSet], triplets: &[TripletRecord]) -> Result<BenchmarkReport> {
    check_triplets(triplets)?;
    let per_triplet = triplets
        .iter()
        .map(|t| {
            let votes = voters
                .iter()
                .map(|v| match v.choices.get(&t.id) {
                    Some(Some(c)) => Ok(*c),
                    Some(None) => Ok(1 - t.gt_index),
                    None => Err(Error::Config(format!("voter `{}` has no choice for triplet `{}`", v.name, t.id))),
                })
                .collect::<Result<Vec<u8>>>()?;
            let choice = ensemble_vote(&votes)?;
            let ones = votes.iter().filter(|&&c| c == 1).count();
            Ok(TripletOutcome {
                id: t.id.clone(),
                score0: (votes.len() - ones) as f64,
                score1: ones as f64,
                choice: Some(choice),
                gt_index: t.gt_index,
                correct: choice == t.gt_index,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let names: Vec<&str> = voters.iter().map(|v| v.name.as_str()).collect();
    Ok(BenchmarkReport::new(format!("ensemble({})", names.join(", ")), None, triplets, per_triplet))
}

/// Mean squared deviation from the mean; 0 for fewer than two values.
pub fn population_variance(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n
}

/// Scores of the first frame against each later frame.
pub fn frame_scores(metric: &dyn PairMetric, frames: &[String]) -> Result<Vec<f64>> {
    let Some(first) = frames.first() else {
        return Err(Error::Config("empty frame list".into()));
    };
    frames[1..].par_iter().map(|f| metric.pair_score(first, f)).collect()
}

/// Population variance of the first-frame scores.
pub fn video_consistency_variance(metric: &dyn PairMetric, frames: &[String]) -> Result<f64> {
    Ok(population_variance(&frame_scores(metric, frames)?))
}
