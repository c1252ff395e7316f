//! Property tests for the invariants that must hold on every input.

use std::collections::{HashMap, HashSet};

use mmkg::config::RunConfig;
use mmkg::eval::{brute_force_oracle, rank_of, similarity};
use mmkg::fusion::{fuse, FusionWeights};
use mmkg::gmnm::{apply_dropout, apply_gmnm};
use mmkg::graphdata::{FeatureStats, Triple};
use mmkg::kgc::{rotate_score, sample_negatives, ScoreNorm};
use mmkg::mmea::{contrastive_loss, ProbationCache};
use mmkg::numkit::{ParamStore, Tape, Tensor};
use mmkg::rng::seeded;
use proptest::prelude::*;

fn matrix(rows: usize, cols: usize, seed: u64) -> Tensor {
    Tensor::randn(&[rows, cols], 1.0, &mut seeded(seed))
}

/// `-mean log((p12 + p21) / 2)` written with plain loops.
fn contrastive_oracle(a: &Tensor, b: &Tensor, tau: f64) -> f64 {
    let n = a.rows();
    let unit = |t: &Tensor, i: usize| {
        let r = t.row(i);
        let norm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
        r.iter().map(|v| v / norm).collect::<Vec<_>>()
    };
    let ua: Vec<_> = (0..n).map(|i| unit(a, i)).collect();
    let ub: Vec<_> = (0..n).map(|i| unit(b, i)).collect();
    let dot = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).sum::<f64>() / tau;
    let prob = |src: &[Vec<f64>], dst: &[Vec<f64>], i: usize| {
        let mut denom = 0.0;
        for j in 0..n {
            denom += dot(&src[i], &dst[j]).exp();
            if j != i {
                denom += dot(&src[i], &src[j]).exp();
            }
        }
        dot(&src[i], &dst[i]).exp() / denom
    };
    (0..n)
        .map(|i| -((prob(&ua, &ub, i) + prob(&ub, &ua, i)) / 2.0).ln())
        .sum::<f64>()
        / n as f64
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn rank_matches_sort_oracle(
        scores in prop::collection::vec(0i32..6, 1..40),
        mask_bits in any::<u64>(),
        target_pick in any::<usize>(),
        lower in any::<bool>(),
    ) {
        let scores: Vec<f64> = scores.into_iter().map(f64::from).collect();
        let n = scores.len();
        let target = target_pick % n;
        let excluded: Vec<bool> = (0..n).map(|i| i != target && (mask_bits >> (i % 64)) & 1 == 1).collect();
        let r = rank_of(&scores, target, |i| excluded[i], lower).unwrap();
        prop_assert_eq!(r, brute_force_oracle(&scores, target, &excluded, lower));
        let kept = excluded.iter().filter(|&&e| !e).count() as f64;
        prop_assert!(r >= 1.0 && r <= kept);
    }

    #[test]
    fn cosine_similarity_matches_plain_loops(seed in any::<u64>(), n in 1usize..6, d in 1usize..5) {
        let a = matrix(n, d, seed);
        let b = matrix(n, d, seed ^ 1);
        let idx: Vec<usize> = (0..n).collect();
        let s = similarity(&a, &idx, &b, &idx).unwrap();
        for i in 0..n {
            for j in 0..n {
                let dot: f64 = a.row(i).iter().zip(b.row(j)).map(|(x, y)| x * y).sum();
                let na = a.row(i).iter().map(|x| x * x).sum::<f64>().sqrt();
                let nb = b.row(j).iter().map(|x| x * x).sum::<f64>().sqrt();
                prop_assert!((s.row(i)[j] - dot / (na * nb)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn contrastive_loss_matches_oracle_and_is_nonnegative(
        seed in any::<u64>(), n in 1usize..6, d in 1usize..5, tau in 0.2f64..2.0,
    ) {
        let a = matrix(n, d, seed);
        let b = matrix(n, d, seed ^ 7);
        let mut tape = Tape::new();
        let (va, vb) = (tape.constant(a.clone()), tape.constant(b.clone()));
        let l = contrastive_loss(&mut tape, va, vb, tau, true, None).unwrap();
        let v = tape.value(l).item();
        prop_assert!(v >= -1e-12);
        prop_assert!((v - contrastive_oracle(&a, &b, tau)).abs() < 1e-9);
    }

    #[test]
    fn gmnm_zero_rate_or_ratio_is_bit_identical(seed in any::<u64>(), rows in 1usize..30, eps in 0f64..=1.0, rho in 0f64..=1.0) {
        let x = matrix(rows, 3, seed);
        let stats = FeatureStats { mean: vec![0.5; 3], std: vec![2.0; 3] };
        prop_assert_eq!(apply_gmnm(&x, &stats, 0.0, eps, &mut seeded(seed)).unwrap(), x.clone());
        prop_assert_eq!(apply_gmnm(&x, &stats, rho, 0.0, &mut seeded(seed)).unwrap(), x);
    }

    #[test]
    fn gmnm_rows_are_kept_or_mixed(seed in any::<u64>(), rho in 0f64..=1.0, eps in 0.01f64..=1.0) {
        let x = matrix(40, 2, seed);
        let stats = FeatureStats { mean: vec![3.0; 2], std: vec![0.0; 2] };
        // With zero std every masked row is exactly (1 - eps) x + eps * mean.
        let out = apply_gmnm(&x, &stats, rho, eps, &mut seeded(seed)).unwrap();
        for r in 0..40 {
            let kept = out.row(r) == x.row(r);
            let mixed = out.row(r).iter().zip(x.row(r)).all(|(o, v)| (o - ((1.0 - eps) * v + eps * 3.0)).abs() < 1e-12);
            prop_assert!(kept || mixed);
        }
    }

    #[test]
    fn dropout_is_deterministic_and_only_zeroes(seed in any::<u64>(), p in 0f64..0.99) {
        let x = matrix(10, 4, seed);
        let a = apply_dropout(&x, p, false, &mut seeded(seed)).unwrap();
        let b = apply_dropout(&x, p, false, &mut seeded(seed)).unwrap();
        prop_assert_eq!(&a, &b);
        for (o, v) in a.data().iter().zip(x.data()) {
            prop_assert!(*o == 0.0 || o == v);
        }
    }

    #[test]
    fn fusion_attention_and_confidence_are_distributions(
        seed in any::<u64>(), batch in 1usize..4, modalities in 1usize..5, heads in 1usize..3,
    ) {
        let d = 2 * heads;
        let mut params = ParamStore::new();
        let w = FusionWeights::new(&mut params, d, heads, 4, &mut seeded(seed)).unwrap();
        let mut tape = Tape::new();
        let bound = params.bind_frozen(&mut tape);
        let h = tape.constant(Tensor::randn(&[batch, modalities, d], 1.0, &mut seeded(seed ^ 3)));
        let out = fuse(&mut tape, &bound, &w, h).unwrap();
        for beta in &out.attention {
            for row in tape.value(*beta).data().chunks(modalities) {
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
        for row in tape.value(out.confidence).data().chunks(modalities) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(row.iter().all(|&c| c > 0.0));
        }
        prop_assert_eq!(tape.value(out.fused).shape(), &[batch, modalities, d]);
    }

    #[test]
    fn rotation_of_head_scores_zero_and_is_periodic(seed in any::<u64>(), half in 1usize..6, k in -3i32..3) {
        let mut rng = seeded(seed);
        let h = Tensor::randn(&[1, 2 * half], 1.0, &mut rng);
        let phases = Tensor::uniform(&[1, half], -3.0, 3.0, &mut rng);
        let mut t = vec![0.0; 2 * half];
        for i in 0..half {
            let (re, im) = (h.data()[i], h.data()[half + i]);
            let (c, s) = (phases.data()[i].cos(), phases.data()[i].sin());
            t[i] = re * c - im * s;
            t[half + i] = re * s + im * c;
        }
        for norm in [ScoreNorm::L1, ScoreNorm::L2] {
            prop_assert!(rotate_score(h.data(), phases.data(), &t, norm).unwrap().abs() < 1e-6);
            let tail = Tensor::randn(&[1, 2 * half], 1.0, &mut rng);
            let shifted: Vec<f64> = phases.data().iter().map(|p| p + 2.0 * std::f64::consts::PI * k as f64).collect();
            let a = rotate_score(h.data(), phases.data(), tail.data(), norm).unwrap();
            let b = rotate_score(h.data(), &shifted, tail.data(), norm).unwrap();
            prop_assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn negatives_never_copy_the_positive(seed in any::<u64>(), n in 2usize..10, k in 1usize..20) {
        let t = Triple::new(0, 0, 1 % n);
        let negs = sample_negatives(t, k, n, &HashSet::new(), &mut seeded(seed)).unwrap();
        prop_assert_eq!(negs.len(), k);
        for x in negs {
            prop_assert!(x != t);
            prop_assert!(x.head == t.head || x.tail == t.tail);
        }
    }

    #[test]
    fn config_text_round_trips(
        seed in any::<u64>(), lr in 1e-6f64..1.0, rho in 0f64..=1.0, eps in 0f64..=1.0, dim in 1usize..64, iterative in any::<bool>(),
    ) {
        let text = format!(
            "run.seed = {seed}\nkgc.lr = {lr:?}\ngmnm.rho = {rho:?}\ngmnm.epsilon = {eps:?}\nea.dim = {dim}\nea.iterative = {iterative}\n"
        );
        let c = RunConfig::parse(&text).unwrap();
        prop_assert_eq!(c.seed, seed);
        prop_assert_eq!(c.kgc.lr, lr);
        let again = RunConfig::parse(&c.to_text()).unwrap();
        prop_assert_eq!(c, again);
    }

    /// The cache against a direct restatement of the rule: a pair is
    /// promoted after `promote_after` consecutive checks in which it is a
    /// mutual nearest neighbor and neither entity is already promoted.
    #[test]
    fn probation_cache_matches_reference(checks in prop::collection::vec(prop::collection::vec((0usize..4, 0usize..4), 0..5), 0..40)) {
        let k_s = 10;
        let mut cache = ProbationCache::new(5, k_s);
        let mut streak: HashMap<(usize, usize), usize> = HashMap::new();
        let (mut done_l, mut done_r) = (HashSet::new(), HashSet::new());
        for obs in checks {
            let obs: HashSet<(usize, usize)> = obs.into_iter().filter(|(a, b)| !done_l.contains(a) && !done_r.contains(b)).collect();
            let mut expect: Vec<(usize, usize)> = Vec::new();
            streak.retain(|p, _| obs.contains(p));
            for p in &obs {
                let s = streak.entry(*p).or_insert(0);
                *s += 1;
                if *s >= k_s {
                    expect.push(*p);
                }
            }
            for p in &expect {
                streak.remove(p);
                done_l.insert(p.0);
                done_r.insert(p.1);
            }
            expect.sort();
            let input: Vec<_> = obs.iter().copied().collect();
            let mut got = cache.observe(&input);
            got.sort();
            prop_assert_eq!(got, expect);
            let counters: HashMap<_, _> = cache.counters.iter().map(|(&p, &c)| (p, c)).collect();
            prop_assert_eq!(&counters, &streak);
        }
    }
}
