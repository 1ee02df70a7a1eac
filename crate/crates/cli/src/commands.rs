use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use diffsim_backends::{Registry, SourceImage, BACKEND_IDS};
use diffsim_core::{Block, MetricConfig};
use diffsim_eval::datasets::{build_triplets, load_manifest, parse_triplets, video_ids, write_jsonl, Task, TripletRecord};
use diffsim_eval::harness::{default_grid, ensemble_choices, evaluate_triplets, grid_search, frame_scores};
use diffsim_eval::retrieval::{contact_sheet, load_corpus, precompute_corpus, query_topk, CorpusItem};
use diffsim_eval::{
    load_frame_sequence, population_variance, BenchmarkReport, ChoiceSet, DiffSimMetric, Environment, Format,
    ImageTable,
};
use serde_json::json;

use crate::args::{CacheCommand, Common, EvalArgs, GridArgs, RetrieveArgs, TripletsCommand, VideoArgs, WeightsCommand};
use crate::resolve::{self, usage};

const DEFAULT_REPORT_DIR: &str = "diffsim-report";

fn environment(registry: &Registry, config: Option<&MetricConfig>, triplet_seed: Option<u64>) -> Result<Environment> {
    let backends: Vec<&str> = config.map(|c| c.site.backend_id.as_str()).into_iter().collect();
    Ok(Environment::capture(registry, &backends, config.map(|c| c.noise_seed), triplet_seed)?)
}

/// Writes machine output to `--out` if given, else stdout.
fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(path) => {
            if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
            }
            fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
            eprintln!("wrote {}", path.display());
        }
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout.write_all(text.as_bytes())?;
            stdout.flush()?;
        }
    }
    Ok(())
}

pub fn compare(common: &Common, a: &Path, b: &Path) -> Result<()> {
    let registry = resolve::registry(common);
    let config = resolve::metric_config(common, &registry, None)?;
    let scorer = resolve::scorer(common, &registry)?;
    let (ia, ib) = (SourceImage::open(a)?, SourceImage::open(b)?);
    let score = scorer.score(&config, &ia, &ib)?;
    eprintln!("similarity {:.6}", score.value);
    let record = json!({
        "a": a,
        "b": b,
        "score": score.value,
        "aas_ab": score.aas_ab,
        "aas_ba": score.aas_ba,
        "config": config,
        "environment": environment(&registry, Some(&config), None)?,
    });
    emit(common.out.as_deref(), &format!("{record}\n"))
}

fn read_triplets(path: &Path) -> Result<Vec<TripletRecord>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    parse_triplets(&text).with_context(|| format!("in {}", path.display()))
}

/// Ids resolve through the manifest when one is given, else as paths
/// relative to the triplets file.
fn image_table(triplets: &Path, manifest: Option<&Path>) -> Result<ImageTable> {
    Ok(match manifest {
        Some(m) => ImageTable::from_manifest(&load_manifest(m)?),
        None => ImageTable::default().with_root(triplets.parent().unwrap_or(Path::new("."))),
    })
}

fn task_of(triplets: &[TripletRecord]) -> Option<Task> {
    triplets.first().map(|t| t.benchmark.task())
}

fn write_report(common: &Common, report: &BenchmarkReport, default_formats: &[Format]) -> Result<()> {
    let dir = common.out.clone().unwrap_or_else(|| PathBuf::from(DEFAULT_REPORT_DIR));
    let formats = resolve::formats(common, default_formats)?;
    let written = diffsim_eval::emit_report(report, &dir, &formats)?;
    let choices = dir.join("choices.jsonl");
    fs::write(&choices, ChoiceSet::from_report(report).to_jsonl())
        .with_context(|| format!("writing {}", choices.display()))?;
    for path in written.iter().chain([&choices]) {
        eprintln!("wrote {}", path.display());
    }
    eprintln!("accuracy {:.4} ({}/{})", report.accuracy, report.n_correct, report.n_triplets);
    Ok(())
}

pub fn eval(common: &Common, args: &EvalArgs) -> Result<()> {
    let triplets = read_triplets(&args.triplets)?;
    let registry = resolve::registry(common);
    let mut report = if args.ensemble.is_empty() {
        let config = resolve::metric_config(common, &registry, task_of(&triplets))?;
        let table = image_table(&args.triplets, args.manifest.as_deref())?;
        let metric = DiffSimMetric::new(resolve::scorer(common, &registry)?, config.clone(), table)?;
        let mut report = evaluate_triplets(&metric, &triplets)?;
        report.environment = Some(environment(&registry, Some(&config), None)?);
        report
    } else {
        let voters = args.ensemble.iter().map(|p| ChoiceSet::load(p)).collect::<diffsim_eval::Result<Vec<_>>>()?;
        ensemble_choices(&voters, &triplets)?
    };
    if report.environment.is_none() {
        report.environment = Some(environment(&registry, None, None)?);
    }
    write_report(common, &report, &[Format::Json, Format::Csv, Format::Markdown])
}

pub fn gridsearch(common: &Common, args: &GridArgs) -> Result<()> {
    let triplets = read_triplets(&args.triplets)?;
    let registry = resolve::registry(common);
    // resolving a single config checks the backend, kind and resolution flags
    let base = resolve::metric_config(common, &registry, task_of(&triplets))?;
    let backend = registry.get(&base.site.backend_id)?;
    let resolutions = if args.resolutions.is_empty() { vec![base.site.resolution] } else { args.resolutions.clone() };
    for &r in &resolutions {
        backend.check_resolution(r)?;
    }
    let mut grid = default_grid(base.metric_kind, backend.as_ref(), &resolutions, base.noise_seed);
    // explicit site flags narrow the sweep
    let block = common.block.as_deref().map(str::parse::<Block>).transpose()?;
    grid.retain(|c| {
        block.map_or(true, |b| b == c.site.block)
            && common.layer.map_or(true, |l| l == c.site.layer_ordinal)
            && common.timestep.map_or(true, |t| Some(t) == c.site.timestep)
    });
    for c in &mut grid {
        c.shared_noise = base.shared_noise;
        c.crop_subject = base.crop_subject;
        c.cosine_mode = base.cosine_mode;
    }
    if grid.is_empty() {
        return Err(usage("the site flags exclude every grid entry"));
    }
    eprintln!("searching {} configurations over {} triplets", grid.len(), triplets.len());
    let table = image_table(&args.triplets, args.manifest.as_deref())?;
    let scorer = resolve::scorer(common, &registry)?;
    let mut report = grid_search(base.metric_kind, &grid, &triplets, |c| {
        DiffSimMetric::new(scorer.clone(), c.clone(), table.clone())
    })?;
    report.environment = Some(environment(&registry, report.config.as_ref(), None)?);
    if let Some(best) = &report.config {
        eprintln!("best {}", best.canonical());
    }
    write_report(common, &report, &Format::ALL)
}

pub fn triplets(common: &Common, cmd: &TripletsCommand) -> Result<()> {
    let TripletsCommand::Build { manifest } = cmd;
    let m = load_manifest(manifest)?;
    let seed = common.seed.unwrap_or(0);
    let records = build_triplets(&m, seed)?;
    eprintln!("{}: {} triplets with seed {seed}", m.benchmark, records.len());
    emit(common.out.as_deref(), &write_jsonl(&records))
}

pub fn retrieve(common: &Common, args: &RetrieveArgs) -> Result<()> {
    let registry = resolve::registry(common);
    let config = resolve::metric_config(common, &registry, None)?;
    let scorer = resolve::scorer(common, &registry)?;
    let corpus = load_corpus(&args.corpus_manifest)?;
    if scorer.store().is_some() {
        let n = precompute_corpus(&scorer, &config, &corpus)?;
        log::info!("projected {n} corpus images");
    }
    let id = args.query.file_name().map_or_else(|| "query".into(), |n| n.to_string_lossy().into_owned());
    let query = CorpusItem::new(id, args.query.clone());
    let ranking = query_topk(&scorer, &config, &query, &corpus, args.k, args.exclude_query)?;
    if let Some(w) = &ranking.warning {
        eprintln!("warning: {w}");
    }
    let canonical = config.canonical();
    let lines: Vec<_> = ranking
        .results
        .iter()
        .enumerate()
        .map(|(i, r)| {
            json!({ "query": ranking.query, "rank": i + 1, "id": r.id, "score": r.score, "config": canonical })
        })
        .collect();
    emit(common.out.as_deref(), &write_jsonl(&lines))?;
    if let Some(path) = &args.contact_sheet {
        contact_sheet(&query, &ranking, &corpus, args.thumb)?
            .save(path)
            .with_context(|| format!("writing {}", path.display()))?;
        eprintln!("wrote {}", path.display());
    }
    Ok(())
}

pub fn video_var(common: &Common, args: &VideoArgs) -> Result<()> {
    let manifest = load_manifest(&args.manifest)?;
    let registry = resolve::registry(common);
    let config = resolve::metric_config(common, &registry, Some(manifest.benchmark.task()))?;
    let metric = DiffSimMetric::new(resolve::scorer(common, &registry)?, config.clone(), ImageTable::from_manifest(&manifest))?;
    let videos = match &args.video {
        Some(v) => vec![v.clone()],
        None => video_ids(&manifest),
    };
    if videos.is_empty() {
        return Err(usage(format!("{} has no videos", args.manifest.display())));
    }
    let canonical = config.canonical();
    let mut lines = Vec::new();
    let mut variances = Vec::new();
    for video in &videos {
        let frames = load_frame_sequence(&manifest, video)?;
        let scores = frame_scores(&metric, &frames)?;
        let variance = population_variance(&scores);
        variances.push(variance);
        lines.push(json!({ "video": video, "frames": frames.len(), "scores": scores, "variance": variance, "config": canonical }));
    }
    let mean = variances.iter().sum::<f64>() / variances.len() as f64;
    eprintln!("mean variance over {} videos: {mean:.6e}", videos.len());
    emit(common.out.as_deref(), &write_jsonl(&lines))
}

pub fn cache(common: &Common, cmd: &CacheCommand) -> Result<()> {
    let CacheCommand::Gc { budget } = cmd;
    let budget = resolve::parse_size(budget)?;
    let store = resolve::store(common)?.ok_or_else(|| usage("no cache: pass --cache-dir or set DIFFSIM_CACHE_DIR"))?;
    let report = store.gc(budget)?;
    eprintln!(
        "evicted {} of {} entries; {} -> {} bytes",
        report.evicted, report.entries_before, report.bytes_before, report.bytes_after
    );
    emit(common.out.as_deref(), &format!("{}\n", serde_json::to_string(&report)?))
}

pub fn weights(common: &Common, cmd: &WeightsCommand) -> Result<()> {
    let WeightsCommand::Check = cmd;
    let registry = resolve::registry(common);
    let ids: Vec<&str> = match &common.backend {
        Some(b) => vec![b.as_str()],
        None => BACKEND_IDS.to_vec(),
    };
    let mut missing = Vec::new();
    let mut lines = Vec::new();
    for id in ids {
        let status = registry.get(id)?.weights_status();
        eprintln!("{id:<10} {}", if status.is_ready() { "ok" } else { "MISSING" });
        for path in &status.missing {
            eprintln!("           missing {}", path.display());
        }
        if !status.is_ready() {
            missing.push(id.to_string());
        }
        lines.push(status);
    }
    emit(common.out.as_deref(), &write_jsonl(&lines))?;
    if missing.is_empty() {
        Ok(())
    } else {
        anyhow::bail!("weights missing for {}; see scripts/fetch_weights.py", missing.join(", "))
    }
}
