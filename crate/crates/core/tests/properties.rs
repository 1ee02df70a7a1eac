use diffsim_core::{
    aas, attention_weights, cross_aas_pair, multihead_align, similarity, ProjectedLatents,
};
use diffsim_testkit::{oracle, random_latents, random_latents_kv, rng};
use ndarray::Axis;
use proptest::prelude::*;
use rand::seq::SliceRandom;

fn permute_tokens(p: &ProjectedLatents, perm: &[usize]) -> ProjectedLatents {
    let q = p.q().select(Axis(1), perm);
    let k = p.k().select(Axis(1), perm);
    let v = p.v().select(Axis(1), perm);
    ProjectedLatents::new(q, k, v, p.site().clone(), p.source_id()).unwrap()
}

fn scale_v(p: &ProjectedLatents, c: f32) -> ProjectedLatents {
    ProjectedLatents::new(p.q().clone(), p.k().clone(), p.v() * c, p.site().clone(), p.source_id()).unwrap()
}

#[test]
fn multihead_matches_per_head_oracle() {
    let mut r = rng(11);
    let a = random_latents(&mut r, 2, 4, 3);
    let b = random_latents(&mut r, 2, 4, 3);
    let fast = multihead_align(&a, &b).unwrap();
    let slow = oracle::align(&a, &b);
    for (i, row) in slow.iter().enumerate() {
        for (j, x) in row.iter().enumerate() {
            assert!((fast.x[[i, j]] - x).abs() < 1e-5);
        }
    }
    let again = multihead_align(&a, &b).unwrap();
    assert_eq!(fast, again);
}

#[test]
fn multihead_ignores_joint_kv_permutation() {
    let mut r = rng(12);
    let a = random_latents(&mut r, 2, 5, 3);
    let b = random_latents(&mut r, 2, 5, 3);
    let mut perm: Vec<usize> = (0..5).collect();
    perm.shuffle(&mut r);
    let kv_perm = ProjectedLatents::new(
        b.q().clone(),
        b.k().select(Axis(1), &perm),
        b.v().select(Axis(1), &perm),
        b.site().clone(),
        "perm",
    )
    .unwrap();
    let x = multihead_align(&a, &b).unwrap().x;
    let y = multihead_align(&a, &kv_perm).unwrap().x;
    assert!(x.iter().zip(y.iter()).all(|(p, q)| (p - q).abs() < 1e-6));
}

#[test]
fn small_random_pair_matches_oracle() {
    let mut r = rng(13);
    let a = random_latents(&mut r, 1, 3, 2);
    let b = random_latents(&mut r, 1, 3, 2);
    let s = similarity(&a, &b).unwrap();
    assert!((s.value - oracle::similarity(&a, &b)).abs() < 1e-9);
    assert!((aas(&a, &b).unwrap() - oracle::aas(&a, &b)).abs() < 1e-9);
}

#[test]
fn cross_pair_matches_oracle_and_is_symmetric() {
    let mut r = rng(14);
    let za = random_latents_kv(&mut r, 2, 6, 4, 3);
    let zb = random_latents_kv(&mut r, 2, 5, 4, 3);
    let ipa = random_latents_kv(&mut r, 2, 1, 4, 3);
    let ipb = random_latents_kv(&mut r, 2, 1, 4, 3);
    let s = cross_aas_pair(&za, &ipa, &zb, &ipb).unwrap();
    let swapped = cross_aas_pair(&zb, &ipb, &za, &ipa).unwrap();
    assert_eq!(s.value, swapped.value);
    assert!((s.value - oracle::cross_similarity(&za, &ipa, &zb, &ipb)).abs() < 1e-9);
}

#[test]
fn oracle_sweep_over_small_shapes() {
    let mut r = rng(15);
    let mut count = 0;
    for heads in 1..=2 {
        for tokens in 1..=5 {
            for d_head in 1..=4 {
                for _ in 0..3 {
                    let a = random_latents(&mut r, heads, tokens, d_head);
                    let b = random_latents(&mut r, heads, tokens, d_head);
                    let fast = similarity(&a, &b).unwrap();
                    assert!(
                        (fast.value - oracle::similarity(&a, &b)).abs() < 1e-5,
                        "heads={heads} tokens={tokens} d={d_head}"
                    );
                    count += 1;
                }
            }
        }
    }
    assert!(count >= 100);
}

fn shape() -> impl Strategy<Value = (usize, usize, usize, u64)> {
    (1usize..=2, 1usize..=5, 1usize..=4, any::<u64>())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn self_identity((h, t, d, seed) in shape()) {
        let p = random_latents(&mut rng(seed), h, t, d);
        prop_assert!((similarity(&p, &p).unwrap().value - 1.0).abs() < 1e-6);
    }

    #[test]
    fn symmetry_is_bit_exact((h, t, d, seed) in shape()) {
        let mut r = rng(seed);
        let a = random_latents(&mut r, h, t, d);
        let b = random_latents(&mut r, h, t, d);
        let ab = similarity(&a, &b).unwrap();
        let ba = similarity(&b, &a).unwrap();
        prop_assert_eq!(ab.value.to_bits(), ba.value.to_bits());
        prop_assert_eq!(ab.value, 0.5 * (ab.aas_ab + ab.aas_ba));
    }

    #[test]
    fn joint_permutation_invariance((h, t, d, seed) in shape()) {
        let mut r = rng(seed);
        let a = random_latents(&mut r, h, t, d);
        let b = random_latents(&mut r, h, t, d);
        let mut perm: Vec<usize> = (0..t).collect();
        perm.shuffle(&mut r);
        let bp = permute_tokens(&b, &perm);
        let x = similarity(&a, &b).unwrap().value;
        let y = similarity(&a, &bp).unwrap().value;
        prop_assert!((x - y).abs() < 1e-6);
    }

    #[test]
    fn value_scale_invariance((h, t, d, seed) in shape(), c in prop::sample::select(vec![0.1f32, 3.0, 10.0])) {
        let mut r = rng(seed);
        let a = random_latents(&mut r, h, t, d);
        let b = random_latents(&mut r, h, t, d);
        let a2 = scale_v(&a, c);
        let b2 = scale_v(&b, c);
        let base = [aas(&a, &b).unwrap(), aas(&b, &a).unwrap()];
        prop_assert!((aas(&a, &b2).unwrap() - base[0]).abs() < 1e-6);
        prop_assert!((aas(&a2, &b).unwrap() - base[0]).abs() < 1e-6);
        prop_assert!((aas(&b2, &a).unwrap() - base[1]).abs() < 1e-6);
    }

    #[test]
    fn softmax_rows_sum_to_one((h, t, d, seed) in shape(), tk in 1usize..=5) {
        let p = random_latents_kv(&mut rng(seed), h, t, tk, d);
        for head in 0..h {
            let q = p.q().index_axis(Axis(0), head).mapv(f64::from);
            let k = p.k().index_axis(Axis(0), head).mapv(f64::from);
            let w = attention_weights(q.view(), k.view()).unwrap();
            for row in w.rows() {
                prop_assert!((row.sum() - 1.0).abs() < 1e-6);
                prop_assert!(row.iter().all(|&x| x >= 0.0));
            }
        }
    }

    #[test]
    fn scores_in_range((h, t, d, seed) in shape()) {
        let mut r = rng(seed);
        let a = random_latents(&mut r, h, t, d);
        let b = random_latents(&mut r, h, t, d);
        let s = similarity(&a, &b).unwrap();
        for x in [s.value, s.aas_ab, s.aas_ba] {
            prop_assert!((-1.0..=1.0).contains(&x));
        }
    }
}
