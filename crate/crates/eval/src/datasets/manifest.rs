//! Benchmark manifests: a JSON index of pre-extracted images and the
//! per-benchmark annotations the triplet builders need.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Manifest format version understood by this crate.
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Benchmark {
    Nights,
    DreambenchPp,
    Cute,
    IpBench,
    Tid2013,
    Sref,
    Instantstyle,
    Tiktok,
}

/// What a benchmark measures; selects the default timestep.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Task {
    HumanAlign,
    Instance,
    LowLevel,
    Style,
    Video,
}

impl Benchmark {
    pub const ALL: [Benchmark; 8] = [
        Benchmark::Nights,
        Benchmark::DreambenchPp,
        Benchmark::Cute,
        Benchmark::IpBench,
        Benchmark::Tid2013,
        Benchmark::Sref,
        Benchmark::Instantstyle,
        Benchmark::Tiktok,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Benchmark::Nights => "nights",
            Benchmark::DreambenchPp => "dreambench_pp",
            Benchmark::Cute => "cute",
            Benchmark::IpBench => "ip_bench",
            Benchmark::Tid2013 => "tid2013",
            Benchmark::Sref => "sref",
            Benchmark::Instantstyle => "instantstyle",
            Benchmark::Tiktok => "tiktok",
        }
    }

    pub fn task(self) -> Task {
        match self {
            Benchmark::Nights | Benchmark::DreambenchPp => Task::HumanAlign,
            Benchmark::Cute | Benchmark::IpBench => Task::Instance,
            Benchmark::Tid2013 => Task::LowLevel,
            Benchmark::Sref | Benchmark::Instantstyle => Task::Style,
            Benchmark::Tiktok => Task::Video,
        }
    }

    /// Triplet count of the published protocol on the full dataset.
    pub fn published_triplets(self) -> Option<usize> {
        match self {
            Benchmark::Nights => Some(2120),
            Benchmark::DreambenchPp => Some(937),
            Benchmark::Cute => Some(1800),
            Benchmark::IpBench => Some(1495),
            Benchmark::Tid2013 => Some(600),
            Benchmark::Sref | Benchmark::Instantstyle => Some(2000),
            Benchmark::Tiktok => None,
        }
    }
}

impl Task {
    /// Fixed timestep used for block sweeps of this kind of benchmark.
    pub fn default_timestep(self) -> u32 {
        match self {
            Task::Style => 900,
            Task::Instance => 750,
            Task::HumanAlign | Task::LowLevel | Task::Video => 600,
        }
    }
}

impl fmt::Display for Benchmark {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Benchmark {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Benchmark::ALL
            .into_iter()
            .find(|b| b.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown benchmark `{s}`")))
    }
}

/// One image and its annotations. Which fields are required depends on
/// the benchmark; unknown fields are rejected.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestItem {
    pub id: String,
    /// Relative to the manifest's directory in the file; absolute after
    /// `load_manifest`.
    pub path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub role: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub style_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub instance_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lighting_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub distortion_type: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub distortion_level: Option<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub consistency_weight: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rating: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub triplet_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vote: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub video_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frame_index: Option<u32>,
}

impl ManifestItem {
    pub fn new(id: impl Into<String>, path: impl Into<PathBuf>) -> Self {
        ManifestItem { id: id.into(), path: path.into(), ..Default::default() }
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawManifest {
    schema_version: u32,
    benchmark: Benchmark,
    items: Vec<ManifestItem>,
}

/// A validated benchmark manifest.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DatasetManifest {
    pub schema_version: u32,
    pub benchmark: Benchmark,
    pub items: Vec<ManifestItem>,
}

impl DatasetManifest {
    /// Validates ids and per-benchmark fields. Paths are taken as given.
    pub fn new(benchmark: Benchmark, items: Vec<ManifestItem>) -> Result<Self> {
        let m = DatasetManifest { schema_version: MANIFEST_VERSION, benchmark, items };
        m.validate()?;
        Ok(m)
    }

    pub fn item(&self, id: &str) -> Option<&ManifestItem> {
        self.items.iter().find(|i| i.id == id)
    }

    /// Image id to path.
    pub fn paths(&self) -> BTreeMap<String, PathBuf> {
        self.items.iter().map(|i| (i.id.clone(), i.path.clone())).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for (i, item) in self.items.iter().enumerate() {
            if item.id.is_empty() {
                return Err(Error::schema(format!("items[{i}].id"), "must be non-empty"));
            }
            if item.path.as_os_str().is_empty() {
                return Err(Error::schema(format!("items[{i}].path"), "must be non-empty"));
            }
            if !seen.insert(item.id.as_str()) {
                return Err(Error::DuplicateId(item.id.clone()));
            }
        }
        match self.benchmark {
            Benchmark::Nights => validate_nights(&self.items),
            Benchmark::DreambenchPp => validate_grouped(&self.items, "generated", "rating", |i| i.rating),
            Benchmark::Cute => {
                for (i, item) in self.items.iter().enumerate() {
                    require(i, "instance_id", &item.instance_id)?;
                    require(i, "lighting_id", &item.lighting_id)?;
                }
                Ok(())
            }
            Benchmark::IpBench => {
                validate_grouped(&self.items, "variant", "consistency_weight", |i| i.consistency_weight)
            }
            Benchmark::Tid2013 => validate_tid(&self.items),
            Benchmark::Sref | Benchmark::Instantstyle => validate_styles(self.benchmark, &self.items),
            Benchmark::Tiktok => validate_tiktok(&self.items),
        }
    }
}

fn require<'a, T>(i: usize, field: &str, value: &'a Option<T>) -> Result<&'a T> {
    value.as_ref().ok_or_else(|| Error::schema(format!("items[{i}].{field}"), "required"))
}

fn require_finite(i: usize, field: &str, value: Option<f64>) -> Result<f64> {
    match value {
        Some(v) if v.is_finite() => Ok(v),
        Some(_) => Err(Error::schema(format!("items[{i}].{field}"), "must be finite")),
        None => Err(Error::schema(format!("items[{i}].{field}"), "required")),
    }
}

fn role<'a>(i: usize, item: &'a ManifestItem, allowed: &[&str]) -> Result<&'a str> {
    let r = require(i, "role", &item.role)?;
    if allowed.contains(&r.as_str()) {
        Ok(r)
    } else {
        Err(Error::schema(format!("items[{i}].role"), format!("`{r}` is not one of {allowed:?}")))
    }
}

/// Reference/candidate groups keyed by `reference_id`: exactly one
/// `reference` per group, every candidate carries a finite score.
fn validate_grouped(
    items: &[ManifestItem],
    candidate_role: &str,
    score_field: &str,
    score: impl Fn(&ManifestItem) -> Option<f64>,
) -> Result<()> {
    let mut references: BTreeMap<&str, usize> = BTreeMap::new();
    for (i, item) in items.iter().enumerate() {
        let group = require(i, "reference_id", &item.reference_id)?;
        if role(i, item, &["reference", candidate_role])? == "reference" {
            *references.entry(group).or_default() += 1;
        } else {
            require_finite(i, score_field, score(item))?;
            references.entry(group).or_default();
        }
    }
    for (group, n) in references {
        if n != 1 {
            return Err(Error::schema(
                "items",
                format!("reference_id `{group}` has {n} reference images, expected exactly 1"),
            ));
        }
    }
    Ok(())
}

fn validate_nights(items: &[ManifestItem]) -> Result<()> {
    let mut triplets: BTreeMap<&str, BTreeMap<&str, Option<f64>>> = BTreeMap::new();
    for (i, item) in items.iter().enumerate() {
        let t = require(i, "triplet_id", &item.triplet_id)?;
        let r = role(i, item, &["ref", "left", "right"])?;
        let vote = if r == "ref" {
            None
        } else {
            let v = require_finite(i, "vote", item.vote)?;
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::schema(format!("items[{i}].vote"), "must lie in [0, 1]"));
            }
            Some(v)
        };
        if triplets.entry(t).or_default().insert(r, vote).is_some() {
            return Err(Error::schema(format!("items[{i}].role"), format!("triplet `{t}` repeats role `{r}`")));
        }
    }
    for (t, roles) in triplets {
        if roles.len() != 3 {
            return Err(Error::schema("items", format!("triplet `{t}` needs one ref, left and right image")));
        }
        if roles["left"] == roles["right"] {
            return Err(Error::schema("items", format!("triplet `{t}` has tied votes")));
        }
    }
    Ok(())
}

fn validate_tid(items: &[ManifestItem]) -> Result<()> {
    validate_grouped(items, "distorted", "distortion_level", |i| i.distortion_level.map(f64::from))?;
    for (i, item) in items.iter().enumerate() {
        if item.role.as_deref() == Some("distorted") {
            require(i, "distortion_type", &item.distortion_type)?;
            let level = *require(i, "distortion_level", &item.distortion_level)?;
            if !(1..=5).contains(&level) {
                return Err(Error::schema(format!("items[{i}].distortion_level"), "must be in 1..=5"));
            }
        }
    }
    Ok(())
}

/// Images per style in the Sref bench.
pub const SREF_IMAGES_PER_STYLE: usize = 4;

fn validate_styles(benchmark: Benchmark, items: &[ManifestItem]) -> Result<()> {
    let mut styles: BTreeMap<&str, usize> = BTreeMap::new();
    for (i, item) in items.iter().enumerate() {
        *styles.entry(require(i, "style_id", &item.style_id)?).or_default() += 1;
    }
    if benchmark == Benchmark::Sref {
        if let Some((s, n)) = styles.iter().find(|(_, &n)| n != SREF_IMAGES_PER_STYLE) {
            return Err(Error::schema(
                "items",
                format!("style `{s}` has {n} images, expected exactly {SREF_IMAGES_PER_STYLE}"),
            ));
        }
    }
    Ok(())
}

fn validate_tiktok(items: &[ManifestItem]) -> Result<()> {
    let mut frames = HashSet::new();
    for (i, item) in items.iter().enumerate() {
        let video = require(i, "video_id", &item.video_id)?;
        let index = require(i, "frame_index", &item.frame_index)?;
        if !frames.insert((video, index)) {
            return Err(Error::schema(
                format!("items[{i}].frame_index"),
                format!("video `{video}` repeats frame {index}"),
            ));
        }
    }
    Ok(())
}

/// Reads, validates and resolves a manifest. Relative paths are joined to
/// the manifest's directory and must exist.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let raw: RawManifest =
        serde_json::from_str(&text).map_err(|e| Error::Parse { path: path.to_path_buf(), reason: e.to_string() })?;
    if raw.schema_version != MANIFEST_VERSION {
        return Err(Error::schema(
            "schema_version",
            format!("unsupported version {} (expected {MANIFEST_VERSION})", raw.schema_version),
        ));
    }
    let root = path.parent().unwrap_or(Path::new("."));
    let mut manifest = DatasetManifest::new(raw.benchmark, raw.items)?;
    for item in &mut manifest.items {
        item.path = root.join(&item.path);
        if !item.path.is_file() {
            return Err(Error::DanglingPath { id: item.id.clone(), path: item.path.clone() });
        }
    }
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn style_items(styles: usize, per: usize) -> Vec<ManifestItem> {
        (0..styles)
            .flat_map(|s| {
                (0..per).map(move |j| ManifestItem {
                    style_id: Some(format!("s{s}")),
                    ..ManifestItem::new(format!("s{s}_{j}"), format!("{s}/{j}.png"))
                })
            })
            .collect()
    }

    #[test]
    fn benchmark_names_round_trip() {
        for b in Benchmark::ALL {
            assert_eq!(b.as_str().parse::<Benchmark>().unwrap(), b);
            assert_eq!(serde_json::to_string(&b).unwrap(), format!("\"{b}\""));
        }
    }

    #[test]
    fn sref_needs_four_images_per_style() {
        assert!(DatasetManifest::new(Benchmark::Sref, style_items(2, 4)).is_ok());
        let err = DatasetManifest::new(Benchmark::Sref, style_items(2, 3)).unwrap_err();
        assert!(err.to_string().contains("exactly 4"), "{err}");
        assert!(DatasetManifest::new(Benchmark::Instantstyle, style_items(2, 5)).is_ok());
    }

    #[test]
    fn duplicate_ids_are_named() {
        let mut items = style_items(1, 4);
        items[3].id = items[0].id.clone();
        match DatasetManifest::new(Benchmark::Sref, items).unwrap_err() {
            Error::DuplicateId(id) => assert_eq!(id, "s0_0"),
            e => panic!("{e}"),
        }
    }

    #[test]
    fn missing_fields_carry_their_path() {
        let mut items = style_items(1, 4);
        items[2].style_id = None;
        let err = DatasetManifest::new(Benchmark::Sref, items).unwrap_err();
        assert!(err.to_string().contains("items[2].style_id"), "{err}");

        let tid = vec![
            ManifestItem { reference_id: Some("r".into()), role: Some("reference".into()), ..ManifestItem::new("r", "r.png") },
            ManifestItem {
                reference_id: Some("r".into()),
                role: Some("distorted".into()),
                distortion_type: Some("noise".into()),
                distortion_level: Some(6),
                ..ManifestItem::new("d", "d.png")
            },
        ];
        let err = DatasetManifest::new(Benchmark::Tid2013, tid).unwrap_err();
        assert!(err.to_string().contains("items[1].distortion_level"), "{err}");
    }

    #[test]
    fn nights_rejects_tied_votes() {
        let item = |id: &str, role: &str, vote: Option<f64>| ManifestItem {
            triplet_id: Some("t0".into()),
            role: Some(role.into()),
            vote,
            ..ManifestItem::new(id, format!("{id}.png"))
        };
        let ok = vec![item("r", "ref", None), item("a", "left", Some(0.3)), item("b", "right", Some(0.7))];
        assert!(DatasetManifest::new(Benchmark::Nights, ok).is_ok());
        let tie = vec![item("r", "ref", None), item("a", "left", Some(0.5)), item("b", "right", Some(0.5))];
        assert!(DatasetManifest::new(Benchmark::Nights, tie).is_err());
    }

    #[test]
    fn load_resolves_and_checks_paths() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("a.png"), b"x").unwrap();
        fs::write(dir.path().join("b.png"), b"x").unwrap();
        let manifest = serde_json::json!({
            "schema_version": 1,
            "benchmark": "instantstyle",
            "items": [
                {"id": "a", "path": "a.png", "style_id": "s"},
                {"id": "b", "path": "b.png", "style_id": "s"}
            ]
        });
        let path = dir.path().join("m.json");
        fs::write(&path, manifest.to_string()).unwrap();
        let m = load_manifest(&path).unwrap();
        assert_eq!(m.items.len(), 2);
        assert_eq!(m.items[0].path, dir.path().join("a.png"));

        fs::remove_file(dir.path().join("b.png")).unwrap();
        assert!(matches!(load_manifest(&path).unwrap_err(), Error::DanglingPath { id, .. } if id == "b"));

        fs::write(&path, r#"{"schema_version": 1, "benchmark": "sref", "items": [{"id": "a", "path": "a.png", "styel_id": "s"}]}"#)
            .unwrap();
        let err = load_manifest(&path).unwrap_err();
        assert!(matches!(err, Error::Parse { .. }) && err.to_string().contains("styel_id"), "{err}");
    }
}
