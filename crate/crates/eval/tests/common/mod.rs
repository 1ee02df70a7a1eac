//! Synthetic manifests at full benchmark size and in miniature, plus an
//! independent checker for each benchmark's closeness rule.

#![allow(dead_code)]

use std::collections::BTreeMap;

use diffsim_eval::datasets::{Benchmark, DatasetManifest, ManifestItem, TripletRecord};
use proptest::prelude::*;

fn item(id: String) -> ManifestItem {
    let path = format!("{id}.png");
    ManifestItem::new(id, path)
}

fn styles(b: Benchmark, n: usize, per: usize) -> DatasetManifest {
    let items = (0..n)
        .flat_map(|s| (0..per).map(move |j| ManifestItem { style_id: Some(format!("style{s:03}")), ..item(format!("st{s:03}_{j}")) }))
        .collect();
    DatasetManifest::new(b, items).unwrap()
}

fn nights(n: usize, votes: impl Fn(usize) -> f64) -> DatasetManifest {
    let mut items = Vec::new();
    for t in 0..n {
        let tid = Some(format!("n{t:04}"));
        let left = votes(t);
        items.push(ManifestItem { triplet_id: tid.clone(), role: Some("ref".into()), ..item(format!("n{t:04}_ref")) });
        items.push(ManifestItem {
            triplet_id: tid.clone(),
            role: Some("left".into()),
            vote: Some(left),
            ..item(format!("n{t:04}_l"))
        });
        items.push(ManifestItem {
            triplet_id: tid,
            role: Some("right".into()),
            vote: Some(1.0 - left),
            ..item(format!("n{t:04}_r"))
        });
    }
    DatasetManifest::new(Benchmark::Nights, items).unwrap()
}

/// Reference/candidate groups; `score(group, candidate)` sets the field.
fn grouped(
    b: Benchmark,
    groups: usize,
    candidates: usize,
    role: &str,
    set: impl Fn(&mut ManifestItem, usize, usize),
) -> DatasetManifest {
    let mut items = Vec::new();
    for g in 0..groups {
        let gid = Some(format!("g{g:03}"));
        items.push(ManifestItem { reference_id: gid.clone(), role: Some("reference".into()), ..item(format!("g{g:03}_ref")) });
        for c in 0..candidates {
            let mut it = ManifestItem { reference_id: gid.clone(), role: Some(role.into()), ..item(format!("g{g:03}_{c}")) };
            set(&mut it, g, c);
            items.push(it);
        }
    }
    DatasetManifest::new(b, items).unwrap()
}

fn cute(instances: usize, lightings: usize, per: usize) -> DatasetManifest {
    let mut items = Vec::new();
    for i in 0..instances {
        for l in 0..lightings {
            for j in 0..per {
                items.push(ManifestItem {
                    instance_id: Some(format!("inst{i:03}")),
                    lighting_id: Some(format!("light{l}")),
                    ..item(format!("c{i:03}_{l}_{j}"))
                });
            }
        }
    }
    DatasetManifest::new(Benchmark::Cute, items).unwrap()
}

fn tid(references: usize, types: usize, levels: u8) -> DatasetManifest {
    let mut items = Vec::new();
    for r in 0..references {
        let rid = Some(format!("i{r:02}"));
        items.push(ManifestItem { reference_id: rid.clone(), role: Some("reference".into()), ..item(format!("i{r:02}")) });
        for t in 0..types {
            for l in 1..=levels {
                items.push(ManifestItem {
                    reference_id: rid.clone(),
                    role: Some("distorted".into()),
                    distortion_type: Some(format!("d{t:02}")),
                    distortion_level: Some(l),
                    ..item(format!("i{r:02}_{t:02}_{l}"))
                });
            }
        }
    }
    DatasetManifest::new(Benchmark::Tid2013, items).unwrap()
}

/// Manifests with the published dataset sizes.
pub fn full_manifest(b: Benchmark) -> DatasetManifest {
    match b {
        Benchmark::Nights => nights(2120, |t| if t % 3 == 0 { 0.25 } else { 0.8 }),
        // 150 originals with 6 generations rated 0-4 (with repeats)
        Benchmark::DreambenchPp => grouped(b, 150, 6, "generated", |it, g, c| it.rating = Some(((g + c * 3) % 5) as f64)),
        Benchmark::Cute => cute(180, 3, 3),
        Benchmark::IpBench => {
            grouped(b, 299, 6, "variant", |it, _, c| it.consistency_weight = Some(0.2 * c as f64))
        }
        Benchmark::Tid2013 => tid(25, 24, 5),
        Benchmark::Sref => styles(b, 508, 4),
        Benchmark::Instantstyle => styles(b, 30, 5),
        Benchmark::Tiktok => unreachable!("no triplets"),
    }
}

/// Small random manifests for each benchmark, with ties in the graded
/// fields so that redraws are exercised.
pub fn mini_manifest(b: Benchmark) -> BoxedStrategy<DatasetManifest> {
    match b {
        Benchmark::Nights => proptest::collection::vec(prop_oneof![Just(0.2), Just(0.4), Just(0.6), Just(0.9)], 1..6)
            .prop_map(|v| nights(v.len(), move |t| v[t]))
            .boxed(),
        Benchmark::DreambenchPp => (1usize..5, 2usize..6, proptest::collection::vec(0u8..3, 30))
            .prop_map(move |(g, c, r)| {
                grouped(b, g, c, "generated", |it, gi, ci| {
                    // the first two candidates always differ
                    let v = if ci < 2 { ci as u8 } else { r[(gi * 6 + ci) % r.len()] };
                    it.rating = Some(f64::from(v));
                })
            })
            .boxed(),
        Benchmark::Cute => (2usize..5, 1usize..3, 2usize..4).prop_map(|(i, l, p)| cute(i, l, p)).boxed(),
        Benchmark::IpBench => (1usize..5, 2usize..7, proptest::collection::vec(0u8..3, 42))
            .prop_map(move |(g, c, w)| {
                grouped(b, g, c, "variant", |it, gi, ci| {
                    let v = if ci < 2 { ci as u8 } else { w[(gi * 7 + ci) % w.len()] };
                    it.consistency_weight = Some(f64::from(v) * 0.25);
                })
            })
            .boxed(),
        Benchmark::Tid2013 => (1usize..4, 1usize..4, 2u8..6).prop_map(|(r, t, l)| tid(r, t, l)).boxed(),
        Benchmark::Sref => (2usize..8).prop_map(|n| styles(Benchmark::Sref, n, 4)).boxed(),
        Benchmark::Instantstyle => (2usize..6, 2usize..6).prop_map(|(n, p)| styles(Benchmark::Instantstyle, n, p)).boxed(),
        Benchmark::Tiktok => unreachable!("no triplets"),
    }
}

/// Checks one triplet against its benchmark's rule using only the
/// manifest annotations.
pub fn rule_holds(m: &DatasetManifest, t: &TripletRecord) -> Result<(), String> {
    let items: BTreeMap<&str, &ManifestItem> = m.items.iter().map(|i| (i.id.as_str(), i)).collect();
    let get = |id: &str| items.get(id).copied().ok_or_else(|| format!("{}: unknown image {id}", t.id));
    let (r, near, far) = (get(&t.reference)?, get(t.closer())?, get(t.farther())?);
    let fail = |why: &str| Err(format!("{}: {why}", t.id));
    if t.gt_index > 1 || t.cand[0] == t.cand[1] || t.cand.contains(&t.reference) {
        return fail("malformed");
    }
    if t.benchmark != m.benchmark {
        return fail("wrong benchmark");
    }
    let is_ref = |i: &ManifestItem| i.role.as_deref() == Some("reference");
    match m.benchmark {
        Benchmark::Nights => {
            let tid = &r.triplet_id;
            if r.role.as_deref() != Some("ref") || &near.triplet_id != tid || &far.triplet_id != tid {
                return fail("not one annotated triplet");
            }
            if near.vote <= far.vote {
                return fail("closer candidate has fewer votes");
            }
        }
        Benchmark::DreambenchPp | Benchmark::IpBench => {
            if !is_ref(r) || is_ref(near) || is_ref(far) {
                return fail("reference must be the original, candidates generated");
            }
            if near.reference_id != r.reference_id || far.reference_id != r.reference_id {
                return fail("candidates from another reference");
            }
            let score = |i: &ManifestItem| i.rating.or(i.consistency_weight);
            if score(near) <= score(far) {
                return fail("closer candidate is not graded higher");
            }
        }
        Benchmark::Cute => {
            if near.instance_id != r.instance_id || far.instance_id == r.instance_id {
                return fail("instance rule violated");
            }
            if near.lighting_id != r.lighting_id || far.lighting_id != r.lighting_id {
                return fail("lighting differs");
            }
        }
        Benchmark::Tid2013 => {
            if !is_ref(r) || near.reference_id != r.reference_id || far.reference_id != r.reference_id {
                return fail("candidates must distort the reference");
            }
            if near.distortion_type.is_none() || near.distortion_type != far.distortion_type {
                return fail("distortion types differ");
            }
            if near.distortion_level >= far.distortion_level {
                return fail("closer candidate is not the lower level");
            }
        }
        Benchmark::Sref | Benchmark::Instantstyle => {
            if near.style_id != r.style_id || far.style_id == r.style_id {
                return fail("style rule violated");
            }
        }
        Benchmark::Tiktok => return fail("no triplets"),
    }
    Ok(())
}

pub const TRIPLET_BENCHMARKS: [Benchmark; 7] = [
    Benchmark::Nights,
    Benchmark::DreambenchPp,
    Benchmark::Cute,
    Benchmark::IpBench,
    Benchmark::Tid2013,
    Benchmark::Sref,
    Benchmark::Instantstyle,
];
