//! Weight-free acceptance run. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.

mod common;

use std::collections::BTreeMap;
use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::Instant;

use diffsim_backends::{compute_pair_score, forward_noise, NoiseSchedule, Registry, Scorer, SourceImage, ToyBackend};
use diffsim_core::{aas, attention_weights, cross_aas_pair, similarity, MetricConfig, MetricKind, ProjectedLatents};
use diffsim_eval::datasets::{build_triplets, Benchmark, DatasetManifest, ManifestItem, TripletRecord};
use diffsim_eval::harness::{
    default_grid, ensemble_vote, evaluate_triplets, grid_search, video_consistency_variance, BenchmarkReport,
    DiffSimMetric, FnMetric, ImageTable, PairMetric,
};
use diffsim_eval::retrieval::{query_topk, CorpusItem};
use diffsim_eval::Result as EvalResult;
use diffsim_store::{CacheKey, FeatureStore};
use diffsim_testkit::{oracle, random_image, random_latents_kv, rng};
use ndarray::{Array3, Axis};
use proptest::test_runner::{Config, TestCaseError, TestRunner};
use rand::seq::SliceRandom;
use rand::Rng;

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn toy_configs() -> Vec<MetricConfig> {
    let reg = Registry::global();
    ["toy-self", "toy-cross"]
        .iter()
        .flat_map(|id| reg.get(id).unwrap().sites())
        .map(|site| {
            let kind = MetricKind::for_backend(&site.backend_id).unwrap();
            MetricConfig::new(site, kind)
        })
        .collect()
}

fn self_identity() -> Outcome {
    let configs = toy_configs();
    let mut worst = 0f64;
    for seed in 0..100u64 {
        let (w, h) = (32 + (seed as u32 * 7) % 64, 32 + (seed as u32 * 13) % 64);
        let img = SourceImage::from_rgb(random_image(seed, w, h));
        for c in &configs {
            let s = compute_pair_score(c, &img, &img).map_err(|e| e.to_string())?;
            worst = worst.max((s.value - 1.0).abs());
        }
    }
    ensure(worst < 1e-5, || format!("max |score - 1| = {worst:e}"))?;
    Ok(format!("100 images x {} sites, max |score - 1| = {worst:.1e}", configs.len()))
}

fn random_pair(r: &mut impl Rng) -> (ProjectedLatents, ProjectedLatents) {
    let (h, d) = (r.random_range(1..=4), r.random_range(1..=8));
    let (ta, tb) = (r.random_range(1..=16), r.random_range(1..=16));
    let a = random_latents_kv(r, h, ta, tb, d);
    let b = random_latents_kv(r, h, tb, ta, d);
    (a, b)
}

fn symmetry() -> Outcome {
    let mut r = rng(2);
    for case in 0..100 {
        let (a, b) = random_pair(&mut r);
        let ab = similarity(&a, &b).map_err(|e| e.to_string())?.value;
        let ba = similarity(&b, &a).map_err(|e| e.to_string())?.value;
        ensure(ab.to_bits() == ba.to_bits(), || format!("case {case}: {ab:e} vs {ba:e}"))?;
    }
    let c = &toy_configs()[0];
    for seed in 0..10u64 {
        let a = SourceImage::from_rgb(random_image(1000 + seed, 48, 40));
        let b = SourceImage::from_rgb(random_image(2000 + seed, 40, 56));
        let ab = compute_pair_score(c, &a, &b).map_err(|e| e.to_string())?.value;
        let ba = compute_pair_score(c, &b, &a).map_err(|e| e.to_string())?.value;
        ensure(ab.to_bits() == ba.to_bits(), || format!("image pair {seed}: {ab:e} vs {ba:e}"))?;
    }
    Ok("100 latent pairs and 10 toy image pairs bit-identical".into())
}

fn permute_tokens(p: &ProjectedLatents, perm: &[usize]) -> ProjectedLatents {
    ProjectedLatents::new(
        p.q().select(Axis(1), perm),
        p.k().select(Axis(1), perm),
        p.v().select(Axis(1), perm),
        p.site().clone(),
        p.source_id(),
    )
    .unwrap()
}

fn permutation_invariance() -> Outcome {
    let mut r = rng(3);
    let mut worst = 0f64;
    for case in 0..100 {
        let h = r.random_range(1..=3);
        let d = r.random_range(1..=8);
        let t = r.random_range(2..=12);
        let a = random_latents_kv(&mut r, h, t, t, d);
        let b = random_latents_kv(&mut r, h, t, t, d);
        let mut perm: Vec<usize> = (0..t).collect();
        perm.shuffle(&mut r);
        let base = similarity(&a, &b).map_err(|e| e.to_string())?.value;
        let moved = if case % 2 == 0 {
            similarity(&a, &permute_tokens(&b, &perm))
        } else {
            similarity(&permute_tokens(&a, &perm), &b)
        }
        .map_err(|e| e.to_string())?
        .value;
        worst = worst.max((base - moved).abs());
    }
    ensure(worst < 1e-6, || format!("max change {worst:e}"))?;
    Ok(format!("100 cases, max change {worst:.1e}"))
}

fn scale_v(p: &ProjectedLatents, c: f32) -> ProjectedLatents {
    ProjectedLatents::new(p.q().clone(), p.k().clone(), p.v() * c, p.site().clone(), p.source_id()).unwrap()
}

fn v_scale_invariance() -> Outcome {
    let mut r = rng(4);
    let mut worst = 0f64;
    for _ in 0..100 {
        let (a, b) = random_pair(&mut r);
        let base = [aas(&a, &b), aas(&b, &a), aas(&a, &a)];
        for c in [0.1f32, 3.0, 10.0] {
            for (x, y) in [(scale_v(&a, c), b.clone()), (a.clone(), scale_v(&b, c)), (scale_v(&a, c), scale_v(&b, c))] {
                let got = [aas(&x, &y), aas(&y, &x), aas(&x, &x)];
                for (g, w) in got.iter().zip(&base) {
                    let (g, w) = (g.as_ref().map_err(|e| e.to_string())?, w.as_ref().map_err(|e| e.to_string())?);
                    worst = worst.max((g - w).abs());
                }
            }
        }
    }
    ensure(worst < 1e-6, || format!("max change {worst:e}"))?;
    Ok(format!("100 cases x 3 scales, max change {worst:.1e}"))
}

fn oracle_equivalence() -> Outcome {
    let mut r = rng(5);
    let (mut n, mut worst) = (0, 0f64);
    for heads in 1..=2 {
        for ta in 1..=5 {
            for tb in 1..=5 {
                for d in 1..=4 {
                    let a = random_latents_kv(&mut r, heads, ta, tb, d);
                    let b = random_latents_kv(&mut r, heads, tb, ta, d);
                    let fast = similarity(&a, &b).map_err(|e| e.to_string())?;
                    let dirs = [
                        (fast.value, oracle::similarity(&a, &b)),
                        (fast.aas_ab, oracle::aas(&a, &b)),
                        (fast.aas_ba, oracle::aas(&b, &a)),
                    ];
                    let cross = cross_aas_pair(&a, &b, &b, &a).map_err(|e| e.to_string())?.value;
                    for (x, y) in dirs.into_iter().chain([(cross, oracle::cross_similarity(&a, &b, &b, &a))]) {
                        worst = worst.max((x - y).abs());
                    }
                    n += 1;
                }
            }
        }
    }
    ensure(n >= 100 && worst < 1e-5, || format!("{n} instances, max deviation {worst:e}"))?;
    let mut row_err = 0f64;
    for _ in 0..100 {
        let (tq, tk, d) = (r.random_range(1..=40), r.random_range(1..=40), r.random_range(1..=16));
        let scale = r.random_range(0.1..30.0);
        let q = ndarray::Array2::from_shape_fn((tq, d), |_| r.random_range(-scale..scale));
        let k = ndarray::Array2::from_shape_fn((tk, d), |_| r.random_range(-scale..scale));
        let w = attention_weights(q.view(), k.view()).map_err(|e| e.to_string())?;
        for row in w.rows() {
            row_err = row_err.max((row.sum() - 1.0).abs());
        }
    }
    ensure(row_err < 1e-6, || format!("softmax row sum off by {row_err:e}"))?;
    Ok(format!("{n} instances, max deviation {worst:.1e}; softmax rows within {row_err:.1e}"))
}

fn forward_noise_closed_form() -> Outcome {
    let mut r = rng(6);
    let s = NoiseSchedule::toy();
    let x0 = Array3::<f64>::from_shape_fn((4, 8, 8), |_| r.random_range(-3.0..3.0));
    let eps = Array3::<f64>::from_shape_fn((4, 8, 8), |_| r.random_range(-3.0..3.0));
    let at = |t| forward_noise(&x0, t, &eps, &s).map_err(|e| e.to_string());
    ensure(at(0)? == x0, || "t = 0 is not x0".into())?;
    ensure(at(s.total())? == eps, || "t = T is not eps".into())?;
    let mid = at(s.total() / 2)?;
    let h = 0.5f64.sqrt();
    let err = mid.iter().zip(x0.iter().zip(&eps)).map(|(m, (x, e))| (m - (h * x + h * e)).abs()).fold(0.0, f64::max);
    ensure(err < 1e-9, || format!("midpoint error {err:e}"))?;
    Ok(format!("endpoints exact, midpoint error {err:.1e}"))
}

fn triplet_protocols() -> Outcome {
    let mut counts = Vec::new();
    for b in common::TRIPLET_BENCHMARKS {
        let m = common::full_manifest(b);
        let ts = build_triplets(&m, 0).map_err(|e| format!("{b}: {e}"))?;
        let want = b.published_triplets().unwrap();
        ensure(ts.len() == want, || format!("{b}: {} triplets, expected {want}", ts.len()))?;
        for t in &ts {
            common::rule_holds(&m, t)?;
        }
        counts.push(format!("{b} {}", ts.len()));
    }
    for b in common::TRIPLET_BENCHMARKS {
        let mut runner = TestRunner::new(Config { cases: 48, failure_persistence: None, ..Config::default() });
        runner
            .run(&(common::mini_manifest(b), proptest::num::u64::ANY), |(m, seed)| {
                let ts = build_triplets(&m, seed).map_err(|e| TestCaseError::fail(e.to_string()))?;
                for t in &ts {
                    common::rule_holds(&m, t).map_err(TestCaseError::fail)?;
                }
                Ok(())
            })
            .map_err(|e| format!("{b} property: {e}"))?;
    }
    Ok(format!("{}; rule property holds on mini manifests", counts.join(", ")))
}

fn crafted(n: usize, gt: u8) -> TripletRecord {
    TripletRecord {
        id: format!("t{n}"),
        reference: format!("r{n}"),
        cand: [format!("a{n}"), format!("b{n}")],
        gt_index: gt,
        benchmark: Benchmark::Nights,
        meta: Default::default(),
    }
}

fn table_metric(scores: &[(&str, f64)]) -> FnMetric<impl Fn(&str, &str) -> EvalResult<f64> + Sync> {
    let scores: BTreeMap<String, f64> = scores.iter().map(|(k, v)| (k.to_string(), *v)).collect();
    FnMetric::new("table", move |_, b| Ok(scores[b]))
}

fn harness_arithmetic() -> Outcome {
    let ts = [crafted(0, 0), crafted(1, 1), crafted(2, 0)];
    let m = table_metric(&[("a0", 0.9), ("b0", 0.2), ("a1", 0.1), ("b1", 0.6), ("a2", 0.3), ("b2", 0.8)]);
    let r = evaluate_triplets(&m, &ts).map_err(|e| e.to_string())?;
    ensure(r.n_correct == 2 && r.accuracy == 2.0 / 3.0, || format!("accuracy {}", r.accuracy))?;
    let tie = table_metric(&[("a0", 0.5), ("b0", 0.5)]);
    let r = evaluate_triplets(&tie, &ts[..1]).map_err(|e| e.to_string())?;
    ensure(r.accuracy == 0.0 && r.per_triplet[0].choice.is_none(), || "tie was not counted incorrect".into())?;
    let vote = ensemble_vote(&[0, 0, 1]).map_err(|e| e.to_string())?;
    ensure(vote == 0, || format!("vote (0,0,1) gave {vote}"))?;
    let frames: Vec<String> = ["f0", "f1", "f2"].map(String::from).to_vec();
    let var = video_consistency_variance(&table_metric(&[("f1", 0.9), ("f2", 0.8)]), &frames).map_err(|e| e.to_string())?;
    ensure((var - 0.0025).abs() < 1e-12, || format!("variance {var}"))?;
    Ok(format!("accuracy 2/3, tie incorrect, vote 0, variance {var}"))
}

/// Writes `n` seeded random PNGs and returns (id, path) pairs.
fn write_images(dir: &Path, n: u64, seed: u64) -> Vec<(String, PathBuf)> {
    (0..n)
        .map(|i| {
            let id = format!("img{i:02}");
            let path = dir.join(format!("{id}.png"));
            random_image(seed + i, 40 + (i as u32 % 3) * 8, 48).save(&path).unwrap();
            (id, path)
        })
        .collect()
}

fn style_triplets(images: &[(String, PathBuf)], per_style: usize, take: usize) -> Vec<TripletRecord> {
    let items = images
        .iter()
        .enumerate()
        .map(|(i, (id, path))| ManifestItem {
            style_id: Some(format!("s{}", i / per_style)),
            ..ManifestItem::new(id.clone(), path.clone())
        })
        .collect();
    let m = DatasetManifest::new(Benchmark::Instantstyle, items).unwrap();
    build_triplets(&m, 9).unwrap().into_iter().take(take).collect()
}

struct Affine<M>(M);

impl<M: PairMetric> PairMetric for Affine<M> {
    fn label(&self) -> String {
        self.0.label()
    }

    fn config(&self) -> Option<&MetricConfig> {
        self.0.config()
    }

    fn pair_score(&self, a: &str, b: &str) -> EvalResult<f64> {
        Ok(2.0 * self.0.pair_score(a, b)? + 1.0)
    }

    fn triplet_scores(&self, t: &TripletRecord) -> EvalResult<[f64; 2]> {
        Ok(self.0.triplet_scores(t)?.map(|s| 2.0 * s + 1.0))
    }
}

fn same_decisions(a: &BenchmarkReport, b: &BenchmarkReport) -> bool {
    a.accuracy == b.accuracy && a.per_triplet.iter().zip(&b.per_triplet).all(|(x, y)| x.choice == y.choice)
}

fn argmax_invariance() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let images = write_images(dir.path(), 12, 900);
    let table = ImageTable::from_paths(images.iter().cloned().collect());
    let triplets = style_triplets(&images, 3, 40);
    let store = FeatureStore::open(dir.path().join("cache")).map_err(|e| e.to_string())?;
    let scorer = Scorer::new(Registry::global().clone()).with_store(store);
    let toy = ToyBackend::self_attention();
    let grid = default_grid(MetricKind::ToyAas, &toy, &[512], 0);
    let make = |c: &MetricConfig| DiffSimMetric::new(scorer.clone(), c.clone(), table.clone());
    let plain = grid_search(MetricKind::ToyAas, &grid, &triplets, make).map_err(|e| e.to_string())?;
    let shifted = grid_search(MetricKind::ToyAas, &grid, &triplets, |c| make(c).map(Affine))
        .map_err(|e| e.to_string())?;
    ensure(plain.config == shifted.config, || "grid argmax moved".into())?;
    ensure(same_decisions(&plain, &shifted), || "choices or accuracy changed".into())?;
    let (pg, sg) = (plain.grid_table.unwrap(), shifted.grid_table.unwrap());
    ensure(pg.iter().zip(&sg).all(|(x, y)| x.accuracy == y.accuracy), || "grid accuracies changed".into())?;
    Ok(format!(
        "{} configs x {} triplets, argmax {} at {:.3}",
        grid.len(),
        triplets.len(),
        plain.config.unwrap().canonical(),
        plain.accuracy
    ))
}

fn cache_transparency() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let images = write_images(dir.path(), 9, 500);
    let table = ImageTable::from_paths(images.iter().cloned().collect());
    let triplets = style_triplets(&images, 3, 30);
    let corpus: Vec<CorpusItem> = images.iter().map(|(id, p)| CorpusItem::new(id.clone(), p.clone())).collect();
    let store = FeatureStore::open(dir.path().join("cache")).map_err(|e| e.to_string())?;
    let cached = Scorer::new(Registry::global().clone()).with_store(store);
    let uncached = Scorer::new(Registry::global().clone());
    let mut checked = 0;
    for c in toy_configs() {
        let run = |s: &Scorer| -> Result<_, String> {
            let m = DiffSimMetric::new(s.clone(), c.clone(), table.clone()).map_err(|e| e.to_string())?;
            let report = evaluate_triplets(&m, &triplets).map_err(|e| e.to_string())?;
            let ranking = query_topk(s, &c, &corpus[0], &corpus, 4, true).map_err(|e| e.to_string())?;
            Ok((report, ranking))
        };
        let off = run(&uncached)?;
        let cold = run(&cached)?;
        let hits_before = cached.cache_hits();
        let warm = run(&cached)?;
        ensure(cached.cache_hits() > hits_before, || "second pass did not hit the cache".into())?;
        ensure(off == cold && cold == warm, || format!("{}: results differ with the cache", c.canonical()))?;
        checked += 1;
    }

    let store = FeatureStore::open(dir.path().join("round_trip")).map_err(|e| e.to_string())?;
    let mut r = rng(10);
    for i in 0..50u64 {
        let (h, tq, tk, d) = (r.random_range(1..=4), r.random_range(1..=64), r.random_range(1..=64), r.random_range(1..=16));
        let p = random_latents_kv(&mut r, h, tq, tk, d);
        let key = CacheKey {
            image_hash: format!("{i:064x}"),
            backend_id: "toy-self".into(),
            site: p.site().canonical(),
            noise_seed: i,
            resolution: 512,
            variant: "noise=shared;crop=0".into(),
        };
        store.put(&key, &p).map_err(|e| e.to_string())?;
        let back = store.get(&key).map_err(|e| e.to_string())?.ok_or("entry vanished")?;
        let bits = |a: &Array3<f32>| a.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        ensure(
            bits(back.q()) == bits(p.q()) && bits(back.k()) == bits(p.k()) && bits(back.v()) == bits(p.v()),
            || format!("tensor {i} changed in the store"),
        )?;
    }
    Ok(format!("{checked} configs identical with cache off/cold/warm; 50 tensors round-trip bit-exactly"))
}

fn retrieval_oracle() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let images = write_images(dir.path(), 6, 700);
    let query_path = dir.path().join("query.png");
    random_image(777, 44, 52).save(&query_path).map_err(|e| e.to_string())?;
    // the sixth corpus image is a byte copy of the query
    fs::copy(&query_path, &images[5].1).map_err(|e| e.to_string())?;
    let corpus: Vec<CorpusItem> = images.iter().map(|(id, p)| CorpusItem::new(id.clone(), p.clone())).collect();
    let query = CorpusItem::new("query", query_path);
    let scorer = Scorer::new(Registry::global().clone());
    let q_img = SourceImage::open(&query.path).map_err(|e| e.to_string())?;
    for c in toy_configs() {
        let ranking = query_topk(&scorer, &c, &query, &corpus, corpus.len(), true).map_err(|e| e.to_string())?;
        let mut brute: Vec<(String, f64)> = corpus
            .iter()
            .map(|item| {
                let img = SourceImage::open(&item.path).unwrap();
                (item.id.clone(), compute_pair_score(&c, &q_img, &img).unwrap().value)
            })
            .collect();
        brute.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let got: Vec<(String, f64)> = ranking.results.iter().map(|r| (r.id.clone(), r.score)).collect();
        ensure(got == brute, || format!("{}: ranking {got:?} vs brute force {brute:?}", c.canonical()))?;
        ensure(got[0].0 == images[5].0 && (got[0].1 - 1.0).abs() < 1e-5, || {
            format!("{}: duplicate not first: {got:?}", c.canonical())
        })?;
        let top4 = query_topk(&scorer, &c, &query, &corpus, 4, true).map_err(|e| e.to_string())?;
        ensure(top4.results[..] == ranking.results[..4] && top4.warning.is_none(), || "top-4 is not a prefix".into())?;
    }
    Ok("rankings equal brute-force re-scoring; duplicate first with score 1".into())
}

fn main() {
    let criteria: [(u32, &str, fn() -> Outcome); 11] = [
        (1, "self-identity", self_identity),
        (2, "symmetry", symmetry),
        (3, "permutation invariance", permutation_invariance),
        (4, "V-scale invariance", v_scale_invariance),
        (5, "oracle equivalence", oracle_equivalence),
        (6, "forward-noise closed form", forward_noise_closed_form),
        (7, "triplet protocol conformance", triplet_protocols),
        (8, "harness arithmetic", harness_arithmetic),
        (9, "argmax invariance", argmax_invariance),
        (10, "cache transparency", cache_transparency),
        (11, "retrieval oracle", retrieval_oracle),
    ];
    let start = Instant::now();
    let mut failed = 0;
    for (n, name, check) in criteria {
        let t = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(check))
            .unwrap_or_else(|p| Err(format!("panicked: {:?}", p.downcast_ref::<String>().cloned().unwrap_or_default())));
        let secs = t.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {n:>2} PASS  {name}: {detail} [{secs:.1}s]"),
            Err(detail) => {
                failed += 1;
                println!("criterion {n:>2} FAIL  {name}: {detail} [{secs:.1}s]");
            }
        }
    }
    println!("acceptance: {} of 11 passed in {:.1}s", 11 - failed, start.elapsed().as_secs_f64());
    if failed > 0 {
        std::process::exit(1);
    }
}
