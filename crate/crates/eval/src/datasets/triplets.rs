//! Seeded 2AFC triplet construction, one rule per benchmark.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use super::manifest::{Benchmark, DatasetManifest, ManifestItem};
use super::sampler::TripletRng;
use crate::error::{Error, Result};

/// Dreambench++ triplets drawn round-robin over the references.
pub const DREAMBENCH_TRIPLETS: usize = 937;
/// Repetitions per CUTE instance.
pub const CUTE_REPEATS: usize = 10;
/// Repetitions per IP bench character class.
pub const IP_REPEATS: usize = 5;
/// Triplets for each style benchmark.
pub const STYLE_TRIPLETS: usize = 2000;

/// Redraws allowed when a sampled pair has no defined winner.
const MAX_REDRAWS: usize = 10_000;

/// A reference and two candidates; `cand[gt_index]` is the closer one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TripletRecord {
    pub id: String,
    #[serde(rename = "ref")]
    pub reference: String,
    pub cand: [String; 2],
    pub gt_index: u8,
    pub benchmark: Benchmark,
    #[serde(default)]
    pub meta: Map<String, Value>,
}

impl TripletRecord {
    pub fn check(&self) -> Result<()> {
        let bad = |reason: &str| Err(Error::schema(format!("triplet `{}`", self.id), reason));
        if self.gt_index > 1 {
            return bad("gt_index must be 0 or 1");
        }
        if self.cand.contains(&self.reference) {
            return bad("reference repeated among the candidates");
        }
        if self.cand[0] == self.cand[1] {
            return bad("candidates are identical");
        }
        Ok(())
    }

    pub fn closer(&self) -> &str {
        &self.cand[usize::from(self.gt_index)]
    }

    pub fn farther(&self) -> &str {
        &self.cand[1 - usize::from(self.gt_index)]
    }
}

/// Collects triplets, numbering them and placing the closer candidate on
/// a random side.
struct Emitter {
    benchmark: Benchmark,
    seed: u64,
    out: Vec<TripletRecord>,
}

impl Emitter {
    fn push(&mut self, reference: &str, cand: [&str; 2], gt_index: u8, meta: Value) {
        let Value::Object(mut meta) = meta else { unreachable!("meta is an object") };
        meta.insert("seed".into(), self.seed.into());
        self.out.push(TripletRecord {
            id: format!("{}-{:05}", self.benchmark, self.out.len()),
            reference: reference.to_string(),
            cand: cand.map(String::from),
            gt_index,
            benchmark: self.benchmark,
            meta,
        });
    }

    fn push_shuffled(&mut self, rng: &mut TripletRng, reference: &str, closer: &str, farther: &str, meta: Value) {
        if rng.coin() {
            self.push(reference, [closer, farther], 0, meta)
        } else {
            self.push(reference, [farther, closer], 1, meta)
        }
    }
}

fn insufficient(b: Benchmark, reason: impl Into<String>) -> Error {
    Error::Insufficient { benchmark: b.to_string(), reason: reason.into() }
}

/// Builds the benchmark's triplets. Deterministic in `(manifest, seed)`;
/// items are grouped and ordered by id, so manifest order does not matter
/// except for NIGHTS, whose triplets are kept in manifest order.
pub fn build_triplets(manifest: &DatasetManifest, seed: u64) -> Result<Vec<TripletRecord>> {
    manifest.validate()?;
    let b = manifest.benchmark;
    let mut rng = TripletRng::new(b, seed);
    let mut e = Emitter { benchmark: b, seed, out: Vec::new() };
    let mut items: Vec<&ManifestItem> = manifest.items.iter().collect();
    if b != Benchmark::Nights {
        items.sort_by(|x, y| x.id.cmp(&y.id));
    }
    match b {
        Benchmark::Nights => nights(&items, &mut e),
        Benchmark::DreambenchPp => dreambench(&items, &mut rng, &mut e)?,
        Benchmark::Cute => cute(&items, &mut rng, &mut e)?,
        Benchmark::IpBench => ip_bench(&items, &mut rng, &mut e)?,
        Benchmark::Tid2013 => tid2013(&items, &mut rng, &mut e)?,
        Benchmark::Sref | Benchmark::Instantstyle => styles(&items, &mut rng, &mut e)?,
        Benchmark::Tiktok => {
            return Err(Error::Config("tiktok is evaluated on frame sequences, not triplets".into()))
        }
    }
    if e.out.is_empty() {
        return Err(insufficient(b, "no triplet could be formed"));
    }
    Ok(e.out)
}

/// Groups `items` by `key`, preserving order within groups.
fn group_by<'a, K: Ord>(
    items: &[&'a ManifestItem],
    key: impl Fn(&ManifestItem) -> Option<K>,
) -> BTreeMap<K, Vec<&'a ManifestItem>> {
    let mut groups: BTreeMap<K, Vec<&ManifestItem>> = BTreeMap::new();
    for &item in items {
        if let Some(k) = key(item) {
            groups.entry(k).or_default().push(item);
        }
    }
    groups
}

/// Ref plus left/right as annotated; the candidate with more votes wins.
fn nights(items: &[&ManifestItem], e: &mut Emitter) {
    let mut order: Vec<&str> = Vec::new();
    let mut roles: BTreeMap<&str, BTreeMap<&str, &ManifestItem>> = BTreeMap::new();
    for item in items {
        let t = item.triplet_id.as_deref().expect("validated");
        if !roles.contains_key(t) {
            order.push(t);
        }
        roles.entry(t).or_default().insert(item.role.as_deref().expect("validated"), item);
    }
    for t in order {
        let r = &roles[t];
        let (left, right) = (r["left"], r["right"]);
        let votes = [left.vote.expect("validated"), right.vote.expect("validated")];
        let gt = u8::from(votes[1] > votes[0]);
        e.push(&r["ref"].id, [&left.id, &right.id], gt, json!({ "triplet_id": t, "votes": votes }));
    }
}

/// Draws two candidates whose scores differ; equal-score draws are
/// discarded. Returns `(higher, lower)`.
fn distinct_pair<'a>(
    rng: &mut TripletRng,
    candidates: &[&'a ManifestItem],
    score: impl Fn(&ManifestItem) -> f64,
) -> Option<(&'a ManifestItem, &'a ManifestItem)> {
    for _ in 0..MAX_REDRAWS {
        let (i, j) = rng.two_distinct(candidates.len());
        let (a, b) = (candidates[i], candidates[j]);
        match score(a).partial_cmp(&score(b)) {
            Some(std::cmp::Ordering::Greater) => return Some((a, b)),
            Some(std::cmp::Ordering::Less) => return Some((b, a)),
            _ => continue,
        }
    }
    None
}

fn has_two_scores(candidates: &[&ManifestItem], score: impl Fn(&ManifestItem) -> f64) -> bool {
    candidates.iter().any(|c| score(c) != score(candidates[0]))
}

/// Splits a reference/candidate group into its reference and candidates.
fn split_group<'a>(group: &[&'a ManifestItem]) -> (&'a ManifestItem, Vec<&'a ManifestItem>) {
    let reference = *group.iter().find(|i| i.role.as_deref() == Some("reference")).expect("validated");
    let candidates = group.iter().copied().filter(|i| i.role.as_deref() != Some("reference")).collect();
    (reference, candidates)
}

/// The original image against two generated images; higher human rating
/// is closer. References are visited round-robin in id order.
fn dreambench(items: &[&ManifestItem], rng: &mut TripletRng, e: &mut Emitter) -> Result<()> {
    let rating = |i: &ManifestItem| i.rating.expect("validated");
    let groups = group_by(items, |i| i.reference_id.clone());
    let eligible: Vec<_> = groups
        .values()
        .map(|g| split_group(g))
        .filter(|(_, c)| c.len() >= 2 && has_two_scores(c, rating))
        .collect();
    if eligible.is_empty() {
        return Err(insufficient(e.benchmark, "no reference has two generated images with different ratings"));
    }
    for n in 0..DREAMBENCH_TRIPLETS {
        let (reference, candidates) = &eligible[n % eligible.len()];
        let (hi, lo) = distinct_pair(rng, candidates, rating).expect("two ratings exist");
        let meta = json!({
            "reference_id": reference.reference_id,
            "ratings": { &hi.id: rating(hi), &lo.id: rating(lo) },
        });
        e.push_shuffled(rng, &reference.id, &hi.id, &lo.id, meta);
    }
    Ok(())
}

/// Per instance, repeated: two images of the instance under one lighting
/// (reference and positive) and one image of another instance under the
/// same lighting.
fn cute(items: &[&ManifestItem], rng: &mut TripletRng, e: &mut Emitter) -> Result<()> {
    let by_lighting = group_by(items, |i| i.lighting_id.clone());
    let by_instance = group_by(items, |i| i.instance_id.clone());
    for (instance, images) in &by_instance {
        let lightings: Vec<(String, Vec<&ManifestItem>, Vec<&ManifestItem>)> =
            group_by(images, |i| i.lighting_id.clone())
                .into_iter()
                .filter_map(|(lighting, own)| {
                    let others: Vec<&ManifestItem> = by_lighting[&lighting]
                        .iter()
                        .copied()
                        .filter(|i| i.instance_id.as_ref() != Some(instance))
                        .collect();
                    (own.len() >= 2 && !others.is_empty()).then_some((lighting, own, others))
                })
                .collect();
        if lightings.is_empty() {
            return Err(insufficient(
                e.benchmark,
                format!(
                    "instance `{instance}` has no lighting with two of its images and an image of another instance"
                ),
            ));
        }
        for _ in 0..CUTE_REPEATS {
            let (lighting, own, others) = rng.choose(&lightings);
            let (a, b) = rng.two_distinct(own.len());
            let negative = *rng.choose(others);
            let meta = json!({
                "instance_id": instance,
                "lighting_id": lighting,
                "negative_instance_id": negative.instance_id,
            });
            e.push_shuffled(rng, &own[a].id, &own[b].id, &negative.id, meta);
        }
    }
    Ok(())
}

/// Per class, repeated: the original against two variants; the higher
/// consistency weight is closer.
fn ip_bench(items: &[&ManifestItem], rng: &mut TripletRng, e: &mut Emitter) -> Result<()> {
    let weight = |i: &ManifestItem| i.consistency_weight.expect("validated");
    for (class, group) in group_by(items, |i| i.reference_id.clone()) {
        let (reference, variants) = split_group(&group);
        if variants.len() < 2 || !has_two_scores(&variants, weight) {
            return Err(insufficient(
                e.benchmark,
                format!("class `{class}` needs two variants with different consistency weights"),
            ));
        }
        for _ in 0..IP_REPEATS {
            let (hi, lo) = distinct_pair(rng, &variants, weight).expect("two weights exist");
            let meta = json!({
                "reference_id": class,
                "consistency_weights": { &hi.id: weight(hi), &lo.id: weight(lo) },
            });
            e.push_shuffled(rng, &reference.id, &hi.id, &lo.id, meta);
        }
    }
    Ok(())
}

/// One triplet per (reference, distortion type): two levels of the same
/// distortion; the lower level is closer.
fn tid2013(items: &[&ManifestItem], rng: &mut TripletRng, e: &mut Emitter) -> Result<()> {
    let level = |i: &ManifestItem| -f64::from(i.distortion_level.expect("validated"));
    for (reference_id, group) in group_by(items, |i| i.reference_id.clone()) {
        let (reference, distorted) = split_group(&group);
        for (kind, images) in group_by(&distorted, |i| i.distortion_type.clone()) {
            if images.len() < 2 || !has_two_scores(&images, level) {
                return Err(insufficient(
                    e.benchmark,
                    format!("reference `{reference_id}`, distortion `{kind}` needs two different levels"),
                ));
            }
            // `level` is negated, so the "higher" draw is the milder one
            let (mild, strong) = distinct_pair(rng, &images, level).expect("two levels exist");
            let meta = json!({
                "reference_id": reference_id,
                "distortion_type": kind,
                "distortion_levels": { &mild.id: mild.distortion_level, &strong.id: strong.distortion_level },
            });
            e.push_shuffled(rng, &reference.id, &mild.id, &strong.id, meta);
        }
    }
    Ok(())
}

/// A random style, two of its images (reference and positive) and one
/// image of a different random style.
fn styles(items: &[&ManifestItem], rng: &mut TripletRng, e: &mut Emitter) -> Result<()> {
    let groups: Vec<(String, Vec<&ManifestItem>)> = group_by(items, |i| i.style_id.clone()).into_iter().collect();
    let eligible: Vec<usize> = (0..groups.len()).filter(|&s| groups[s].1.len() >= 2).collect();
    if groups.len() < 2 || eligible.is_empty() {
        return Err(insufficient(e.benchmark, "needs two styles, one of them with at least two images"));
    }
    for _ in 0..STYLE_TRIPLETS {
        let s = *rng.choose(&eligible);
        let (style, images) = &groups[s];
        let (a, b) = rng.two_distinct(images.len());
        let mut o = rng.below(groups.len() - 1);
        if o >= s {
            o += 1;
        }
        let (other, others) = &groups[o];
        let negative = *rng.choose(others);
        let meta = json!({ "style_id": style, "negative_style_id": other });
        e.push_shuffled(rng, &images[a].id, &images[b].id, &negative.id, meta);
    }
    Ok(())
}

/// One JSON object per line.
pub fn write_jsonl<T: Serialize>(records: &[T]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("records serialize"));
        out.push('\n');
    }
    out
}

/// Parses a triplets.jsonl file body; blank lines are ignored.
pub fn parse_triplets(text: &str) -> Result<Vec<TripletRecord>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let t: TripletRecord = serde_json::from_str(line)
            .map_err(|err| Error::schema(format!("line {}", n + 1), err.to_string()))?;
        t.check()?;
        out.push(t);
    }
    Ok(out)
}
