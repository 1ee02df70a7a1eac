//! Report files: JSON, per-triplet CSV, a Markdown summary and sweep plots.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Mutex;
use std::time::SystemTime;

use diffsim_backends::Registry;
use diffsim_core::{Block, MetricConfig};
use plotters::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::harness::{BenchmarkReport, GridEntry};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Format {
    Json,
    Csv,
    Markdown,
    Plot,
}

impl Format {
    pub const ALL: [Format; 4] = [Format::Json, Format::Csv, Format::Markdown, Format::Plot];
}

impl FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "json" => Ok(Format::Json),
            "csv" => Ok(Format::Csv),
            "md" | "markdown" => Ok(Format::Markdown),
            "plot" | "svg" => Ok(Format::Plot),
            other => Err(Error::Config(format!("unknown report format `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WeightFile {
    pub backend: String,
    pub path: PathBuf,
    pub sha256: String,
}

/// What produced a report.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Environment {
    pub diffsim_version: String,
    pub os: String,
    pub arch: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise_seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub triplet_seed: Option<u64>,
    pub weights: Vec<WeightFile>,
}

impl Environment {
    /// Versions plus the SHA-256 of every weight file the named backends
    /// read. Missing files are skipped.
    pub fn capture(
        registry: &Registry,
        backends: &[&str],
        noise_seed: Option<u64>,
        triplet_seed: Option<u64>,
    ) -> Result<Self> {
        let mut weights = Vec::new();
        let ids: BTreeSet<&str> = backends.iter().copied().collect();
        for id in ids {
            for path in registry.get(id)?.weights_status().files {
                if path.is_file() {
                    weights.push(WeightFile { backend: id.to_string(), sha256: file_sha256(&path)?, path });
                }
            }
        }
        Ok(Environment {
            diffsim_version: env!("CARGO_PKG_VERSION").to_string(),
            os: std::env::consts::OS.to_string(),
            arch: std::env::consts::ARCH.to_string(),
            noise_seed,
            triplet_seed,
            weights,
        })
    }
}

type HashMemo = HashMap<(PathBuf, u64, Option<SystemTime>), String>;

static HASHES: Mutex<Option<HashMemo>> = Mutex::new(None);

/// Hex SHA-256 of a file, memoized per (path, size, mtime).
pub fn file_sha256(path: &Path) -> Result<String> {
    let meta = fs::metadata(path).map_err(|e| Error::io(path, e))?;
    let key = (path.to_path_buf(), meta.len(), meta.modified().ok());
    if let Some(h) = HASHES.lock().expect("hash memo").as_ref().and_then(|m| m.get(&key)) {
        return Ok(h.clone());
    }
    let mut file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut hasher = Sha256::new();
    let mut buf = vec![0u8; 1 << 20];
    loop {
        let n = file.read(&mut buf).map_err(|e| Error::io(path, e))?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    let hash = hex::encode(hasher.finalize());
    HASHES.lock().expect("hash memo").get_or_insert_with(HashMap::new).insert(key, hash.clone());
    Ok(hash)
}

fn write(path: PathBuf, contents: &[u8]) -> Result<PathBuf> {
    fs::write(&path, contents).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Writes the requested formats into `dir` and returns the files written.
/// Plots need a grid table and are skipped without one.
pub fn emit_report(report: &BenchmarkReport, dir: &Path, formats: &[Format]) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let formats: BTreeSet<Format> = formats.iter().copied().collect();
    let mut out = Vec::new();
    for f in formats {
        match f {
            Format::Json => out.push(write(dir.join("report.json"), to_json(report).as_bytes())?),
            Format::Csv => out.push(write(dir.join("report.csv"), &to_csv(report)?)?),
            Format::Markdown => out.push(write(dir.join("report.md"), to_markdown(report).as_bytes())?),
            Format::Plot => match &report.grid_table {
                Some(grid) => out.extend(plot_grid(report, grid, dir)?),
                None => log::warn!("report has no grid table; skipping plots"),
            },
        }
    }
    Ok(out)
}

pub fn to_json(report: &BenchmarkReport) -> String {
    let mut s = serde_json::to_string_pretty(report).expect("reports serialize");
    s.push('\n');
    s
}

pub fn read_report(path: &Path) -> Result<BenchmarkReport> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse { path: path.to_path_buf(), reason: e.to_string() })
}

/// One row per triplet; the metric column repeats the configuration.
pub fn to_csv(report: &BenchmarkReport) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let bad = |e: csv::Error| Error::Render { path: "report.csv".into(), reason: e.to_string() };
    w.write_record(["triplet_id", "score0", "score1", "choice", "gt_index", "correct", "metric"]).map_err(bad)?;
    for o in &report.per_triplet {
        let choice = o.choice.map(|c| c.to_string()).unwrap_or_default();
        w.write_record([
            o.id.as_str(),
            &o.score0.to_string(),
            &o.score1.to_string(),
            &choice,
            &o.gt_index.to_string(),
            if o.correct { "1" } else { "0" },
            &report.metric,
        ])
        .map_err(bad)?;
    }
    w.into_inner().map_err(|e| Error::Render { path: "report.csv".into(), reason: e.to_string() })
}

pub fn to_markdown(report: &BenchmarkReport) -> String {
    let mut s = String::new();
    let bench = report.benchmark.map(|b| b.to_string()).unwrap_or_else(|| "mixed".into());
    s.push_str(&format!("# {bench}\n\n"));
    s.push_str(&format!("- metric: `{}`\n", report.metric));
    if let Some(c) = &report.config {
        s.push_str(&format!("- config: `{}`\n", c.canonical()));
        s.push_str(&format!("- noise seed: {}\n", c.noise_seed));
    }
    s.push_str(&format!(
        "- accuracy: {:.2}% ({}/{})\n",
        100.0 * report.accuracy,
        report.n_correct,
        report.n_triplets
    ));
    let ties = report.per_triplet.iter().filter(|o| o.choice.is_none()).count();
    if ties > 0 {
        s.push_str(&format!("- ties (counted incorrect): {ties}\n"));
    }
    if let Some(env) = &report.environment {
        s.push_str(&format!("- diffsim {} on {}/{}\n", env.diffsim_version, env.os, env.arch));
        if let Some(seed) = env.triplet_seed {
            s.push_str(&format!("- triplet seed: {seed}\n"));
        }
        for w in &env.weights {
            s.push_str(&format!("- weights `{}` {}: `{}`\n", w.backend, w.path.display(), w.sha256));
        }
    }
    if let Some(grid) = &report.grid_table {
        s.push_str("\nThe best configuration is selected on the evaluated triplets themselves.\n\n");
        s.push_str("| config | accuracy | correct |\n|---|---:|---:|\n");
        let mut rows: Vec<&GridEntry> = grid.iter().collect();
        rows.sort_by(|a, b| b.n_correct.cmp(&a.n_correct).then_with(|| a.canonical.cmp(&b.canonical)));
        for g in rows {
            s.push_str(&format!("| `{}` | {:.2}% | {} |\n", g.canonical, 100.0 * g.accuracy, g.n_correct));
        }
    }
    s
}

/// Lines of the two sweep charts, keyed by series label.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SweepSeries {
    /// Per layer: (timestep, accuracy).
    pub by_timestep: BTreeMap<String, Vec<(u32, f64)>>,
    /// Per timestep: (position on the block axis, accuracy).
    pub by_block: BTreeMap<String, Vec<(usize, f64)>>,
    /// Labels of the block axis positions.
    pub blocks: Vec<String>,
}

fn layer_key(c: &MetricConfig) -> (Block, u32) {
    (c.site.block, c.site.layer_ordinal)
}

/// Groups a grid into one accuracy-vs-timestep line per layer and one
/// accuracy-vs-layer line per timestep. Resolutions are kept apart when
/// the grid has several.
pub fn sweep_series(grid: &[GridEntry]) -> SweepSeries {
    let multi_res = grid.iter().map(|g| g.config.site.resolution).collect::<BTreeSet<_>>().len() > 1;
    let suffix = |c: &MetricConfig| if multi_res { format!(" @{}", c.site.resolution) } else { String::new() };
    let layers: Vec<(Block, u32)> =
        grid.iter().map(|g| layer_key(&g.config)).collect::<BTreeSet<_>>().into_iter().collect();
    let label = |(b, o): (Block, u32)| format!("{b}/{o}");
    let mut out = SweepSeries { blocks: layers.iter().map(|&l| label(l)).collect(), ..Default::default() };
    for g in grid {
        let c = &g.config;
        let Some(t) = c.site.timestep else { continue };
        let layer = layer_key(c);
        out.by_timestep.entry(format!("{}{}", label(layer), suffix(c))).or_default().push((t, g.accuracy));
        let pos = layers.iter().position(|&l| l == layer).expect("collected above");
        out.by_block.entry(format!("t={t:03}{}", suffix(c))).or_default().push((pos, g.accuracy));
    }
    for v in out.by_timestep.values_mut() {
        v.sort_by_key(|p| p.0);
    }
    for v in out.by_block.values_mut() {
        v.sort_by_key(|p| p.0);
    }
    out
}

fn render_err(path: &Path) -> impl Fn(String) -> Error + '_ {
    move |reason| Error::Render { path: path.to_path_buf(), reason }
}

fn line_chart<X>(
    path: &Path,
    title: &str,
    x_desc: &str,
    x_range: std::ops::Range<f64>,
    series: &BTreeMap<String, Vec<(X, f64)>>,
    x_value: impl Fn(&X) -> f64,
    x_label: impl Fn(&f64) -> String,
) -> Result<()> {
    let err = render_err(path);
    let root = SVGBackend::new(path, (900, 560)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| err(e.to_string()))?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 18))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(48)
        .build_cartesian_2d(x_range, 0.0..1.0)
        .map_err(|e| err(e.to_string()))?;
    chart
        .configure_mesh()
        .x_desc(x_desc)
        .y_desc("accuracy")
        .x_label_formatter(&x_label)
        .draw()
        .map_err(|e| err(e.to_string()))?;
    for (i, (name, points)) in series.iter().enumerate() {
        let color = Palette99::pick(i).to_rgba();
        let pts: Vec<(f64, f64)> = points.iter().map(|(x, y)| (x_value(x), *y)).collect();
        chart
            .draw_series(LineSeries::new(pts.clone(), color.stroke_width(2)))
            .map_err(|e| err(e.to_string()))?
            .label(name.as_str())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color.stroke_width(2)));
        chart
            .draw_series(pts.into_iter().map(|p| Circle::new(p, 3, color.filled())))
            .map_err(|e| err(e.to_string()))?;
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(|e| err(e.to_string()))?;
    root.present().map_err(|e| err(e.to_string()))?;
    Ok(())
}

fn plot_grid(report: &BenchmarkReport, grid: &[GridEntry], dir: &Path) -> Result<Vec<PathBuf>> {
    let s = sweep_series(grid);
    if s.by_timestep.is_empty() {
        log::warn!("grid has no timesteps; skipping sweep plots");
        return Ok(Vec::new());
    }
    let bench = report.benchmark.map(|b| b.to_string()).unwrap_or_else(|| "mixed".into());
    let seed = grid[0].config.noise_seed;
    let t_path = dir.join("accuracy_vs_timestep.svg");
    line_chart(
        &t_path,
        &format!("{bench}: accuracy vs timestep (noise seed {seed})"),
        "timestep",
        0.0..1000.0,
        &s.by_timestep,
        |&t| f64::from(t),
        |x| format!("{x:.0}"),
    )?;
    let b_path = dir.join("accuracy_vs_block.svg");
    let blocks = s.blocks.clone();
    line_chart(
        &b_path,
        &format!("{bench}: accuracy vs block (noise seed {seed})"),
        "block/layer",
        -0.5..(blocks.len() as f64 - 0.5),
        &s.by_block,
        |&p| p as f64,
        move |x| {
            let i = x.round();
            if (x - i).abs() < 1e-6 && i >= 0.0 {
                blocks.get(i as usize).cloned().unwrap_or_default()
            } else {
                String::new()
            }
        },
    )?;
    Ok(vec![t_path, b_path])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::Benchmark;
    use crate::harness::{TripletOutcome, REPORT_VERSION};
    use diffsim_core::{AttentionKind, AttentionSite, MetricKind};

    fn config(block: Block, t: u32) -> MetricConfig {
        let site = AttentionSite::new("sd15", AttentionKind::SelfAttn, block, 0).with_timestep(Some(t));
        MetricConfig::new(site, MetricKind::DiffsimS)
    }

    fn report() -> BenchmarkReport {
        let grid: Vec<GridEntry> = [Block::Down(0), Block::Mid, Block::Up(0)]
            .into_iter()
            .enumerate()
            .flat_map(|(i, b)| {
                [300, 600, 900].into_iter().map(move |t| {
                    let c = config(b, t);
                    GridEntry {
                        canonical: c.canonical(),
                        config: c,
                        accuracy: (i as f64 + f64::from(t) / 1000.0) / 4.0,
                        n_correct: 0,
                    }
                })
            })
            .collect();
        BenchmarkReport {
            schema_version: REPORT_VERSION,
            benchmark: Some(Benchmark::Sref),
            metric: "m".into(),
            config: Some(config(Block::Up(0), 900)),
            accuracy: 1.0 / 3.0,
            n_correct: 1,
            n_triplets: 3,
            per_triplet: (0..3)
                .map(|i| TripletOutcome {
                    id: format!("t{i}"),
                    score0: 0.1 * i as f64 + 1e-17,
                    score1: 0.7,
                    choice: if i == 2 { None } else { Some(1) },
                    gt_index: 1 - (i as u8 % 2),
                    correct: i == 1,
                })
                .collect(),
            grid_table: Some(grid),
            environment: Some(Environment {
                diffsim_version: "0".into(),
                os: "linux".into(),
                arch: "x86_64".into(),
                noise_seed: Some(0),
                triplet_seed: Some(7),
                weights: vec![],
            }),
        }
    }

    #[test]
    fn json_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let r = report();
        emit_report(&r, dir.path(), &[Format::Json]).unwrap();
        assert_eq!(read_report(&dir.path().join("report.json")).unwrap(), r);
        let again = to_json(&r);
        assert_eq!(fs::read_to_string(dir.path().join("report.json")).unwrap(), again);
    }

    #[test]
    fn csv_has_a_row_per_triplet() {
        let csv = String::from_utf8(to_csv(&report()).unwrap()).unwrap();
        assert_eq!(csv.lines().count(), 3 + 1);
    }

    #[test]
    fn one_series_per_block_and_per_timestep() {
        let s = sweep_series(report().grid_table.as_ref().unwrap());
        assert_eq!(s.by_timestep.len(), 3);
        assert_eq!(s.by_block.len(), 3);
        assert_eq!(s.blocks, vec!["down_0/0", "mid/0", "up_0/0"]);
        assert!(s.by_timestep.values().all(|v| v.len() == 3));
    }

    #[test]
    fn all_formats_are_written() {
        let dir = tempfile::tempdir().unwrap();
        let files = emit_report(&report(), dir.path(), &Format::ALL).unwrap();
        assert_eq!(files.len(), 5);
        let svg = fs::read_to_string(dir.path().join("accuracy_vs_timestep.svg")).unwrap();
        assert!(svg.starts_with("<svg") && svg.contains("mid/0"));
        let md = fs::read_to_string(dir.path().join("report.md")).unwrap();
        assert!(md.contains("33.33%") && md.contains("triplet seed: 7"));
    }

    #[test]
    fn unwritable_directory_fails() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("f");
        fs::write(&file, b"").unwrap();
        assert!(emit_report(&report(), &file.join("sub"), &[Format::Json]).is_err());
    }

    #[test]
    fn hashes_are_memoized_and_correct() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("w.bin");
        fs::write(&p, b"abc").unwrap();
        let want = "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad";
        assert_eq!(file_sha256(&p).unwrap(), want);
        assert_eq!(file_sha256(&p).unwrap(), want);
    }
}
