//! Property-based invariants.

use proptest::prelude::*;

use hapo_core::encalign;
use hapo_core::hapo;
use hapo_core::metrics;
use hapo_core::policy::{Pathway, PolicyParams, PolicyShape};
use hapo_core::rewards::{self, RewardWeights};
use hapo_core::studysim::RatingRecord;
use hapo_core::sureal;
use hapo_core::synthcorpus::{self, CorpusConfig};

fn paired(min: usize, max: usize) -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (min..=max).prop_flat_map(|n| (prop::collection::vec(-100.0..100.0f64, n), prop::collection::vec(-100.0..100.0f64, n)))
}

fn increasing(x: f64) -> f64 {
    x * x * x + 3.0 * x
}

/// Every subject rates every video, so the fit is well determined.
fn full_design_records(scores: &[Vec<f64>]) -> Vec<RatingRecord> {
    let mut out = Vec::new();
    for (s, row) in scores.iter().enumerate() {
        for (v, &score) in row.iter().enumerate() {
            out.push(RatingRecord {
                subject_id: format!("s{s}"),
                video_id: format!("v{v}"),
                score,
                elapsed_ms: 10_000,
                is_golden: false,
                is_repeat_of: None,
                session_ok: true,
            });
        }
    }
    out
}

fn score_matrix() -> impl Strategy<Value = Vec<Vec<f64>>> {
    (3usize..6, 4usize..8).prop_flat_map(|(s, v)| prop::collection::vec(prop::collection::vec(10.0..90.0f64, v), s))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn tone_map_is_idempotent(x in prop::collection::vec(0.0..1.0f64, 8)) {
        let once = synthcorpus::tone_map(&x).unwrap();
        prop_assert_eq!(synthcorpus::tone_map(&once).unwrap(), once.clone());
        prop_assert_eq!(synthcorpus::tone_map(&x).unwrap(), once);
    }

    #[test]
    fn corpus_is_a_function_of_config_and_seed(seed in any::<u64>()) {
        let cfg = CorpusConfig { n: 12, ..Default::default() };
        prop_assert_eq!(synthcorpus::generate_corpus(&cfg, seed).unwrap(), synthcorpus::generate_corpus(&cfg, seed).unwrap());
    }

    #[test]
    fn rank_metrics_ignore_increasing_transforms((x, y) in paired(3, 20)) {
        let tx: Vec<f64> = x.iter().map(|&v| increasing(v)).collect();
        if let (Ok(a), Ok(b)) = (metrics::srcc(&x, &y), metrics::srcc(&tx, &y)) {
            prop_assert!((a - b).abs() < 1e-12);
        }
        if let (Ok(a), Ok(b)) = (metrics::krcc(&x, &y), metrics::krcc(&tx, &y)) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn plcc_ignores_positive_affine_maps((x, y) in paired(3, 20), a in 0.01..100.0f64, b in -50.0..50.0f64) {
        let ax: Vec<f64> = x.iter().map(|&v| a * v + b).collect();
        if let (Ok(p), Ok(q)) = (metrics::plcc(&x, &y), metrics::plcc(&ax, &y)) {
            prop_assert!((p - q).abs() < 1e-9);
        }
    }

    #[test]
    fn metrics_are_symmetric_and_permutation_invariant((x, y) in paired(3, 20), rot in 0usize..20) {
        let n = x.len();
        let px: Vec<f64> = (0..n).map(|i| x[(i + rot) % n]).collect();
        let py: Vec<f64> = (0..n).map(|i| y[(i + rot) % n]).collect();
        type Metric = fn(&[f64], &[f64]) -> hapo_core::Result<f64>;
        let all: [Metric; 4] = [metrics::plcc, metrics::srcc, metrics::krcc, metrics::rmse];
        for m in all {
            match (m(&x, &y), m(&y, &x), m(&px, &py)) {
                (Ok(a), Ok(b), Ok(c)) => {
                    prop_assert!((a - b).abs() < 1e-12);
                    prop_assert!((a - c).abs() < 1e-12);
                }
                (a, b, c) => prop_assert!(a.is_err() && b.is_err() && c.is_err()),
            }
        }
        prop_assert!(metrics::rmse(&x, &y).unwrap() >= 0.0);
    }

    #[test]
    fn sureal_shift_moves_only_psi(scores in score_matrix(), c in -5.0..5.0f64) {
        let base = sureal::fit(&full_design_records(&scores)).unwrap();
        let shifted: Vec<Vec<f64>> = scores.iter().map(|r| r.iter().map(|s| s + c).collect()).collect();
        let moved = sureal::fit(&full_design_records(&shifted)).unwrap();
        for (k, p) in &base.psi {
            prop_assert!((moved.psi[k] - p - c).abs() < 1e-5, "psi {k}: {} vs {}", moved.psi[k], p + c);
        }
        for (k, b) in &base.bias {
            prop_assert!((moved.bias[k] - b).abs() < 1e-5);
            prop_assert!((moved.inconsistency[k] - base.inconsistency[k]).abs() < 1e-5);
        }
    }

    #[test]
    fn sureal_ignores_record_order(scores in score_matrix(), rot in 0usize..50) {
        let records = full_design_records(&scores);
        let mut rotated = records.clone();
        let len = rotated.len();
        rotated.rotate_left(rot % len);
        rotated.reverse();
        let a = sureal::fit(&records).unwrap();
        let b = sureal::fit(&rotated).unwrap();
        for (k, p) in &a.psi {
            prop_assert!((b.psi[k] - p).abs() < 1e-6);
        }
        // exact block maximisation; only roundoff can lower the value
        prop_assert!(a.loglik_trace.windows(2).all(|w| w[1] >= w[0] - 1e-12 * w[0].abs()));
    }

    #[test]
    fn score_reward_is_symmetric_and_decreasing(target in 10.0..90.0f64, e in 0u8..10, sigma in 0.5..10.0f64) {
        let t = target.round();
        let at = |p: f64| rewards::score_reward(p as u8, t, sigma, 1.0).unwrap();
        prop_assert_eq!(at(t + e as f64), at(t - e as f64));
        prop_assert!(at(t + e as f64) > at(t + e as f64 + 1.0));
    }

    #[test]
    fn self_reward_sums_to_majority_multiplicity(scores in prop::collection::vec(prop::option::of(0u8..5), 2..10)) {
        let r = rewards::self_reward_scores(&scores);
        let want = match rewards::majority_score(&scores) {
            Some(m) => scores.iter().filter(|&&s| s == Some(m)).count(),
            None => 0,
        };
        prop_assert_eq!(r.iter().sum::<f64>(), want as f64);
    }

    #[test]
    fn total_reward_is_linear(f in 0.0..1.0f64, s in 0.0..1.0f64, m in 0.0..1.0f64, w in (0.0..2.0f64, 0.0..2.0f64, 0.0..2.0f64)) {
        let w = RewardWeights { w_fmt: w.0, w_sc: w.1, w_self: w.2 };
        let t = rewards::total_reward(f, s, m, &w);
        prop_assert_eq!(t.total, w.w_fmt * f + w.w_sc * s + w.w_self * m);
    }

    #[test]
    fn k3_divergence_is_nonnegative_and_zero_only_at_equality((p, q) in paired(1, 12)) {
        let p: Vec<f64> = p.iter().map(|v| v / 20.0).collect();
        let q: Vec<f64> = q.iter().map(|v| v / 20.0).collect();
        let d = hapo::k3_divergence(&p, &q).unwrap();
        prop_assert!(d >= 0.0);
        prop_assert_eq!(hapo::k3_divergence(&p, &p).unwrap(), 0.0);
        if p.iter().zip(&q).any(|(a, b)| (a - b).abs() > 1e-3) {
            prop_assert!(d > 0.0);
        }
    }

    #[test]
    fn advantages_are_centred_and_affine_invariant(r in prop::collection::vec(-5.0..5.0f64, 2..12), c in -10.0..10.0f64, s in 0.1..10.0f64) {
        let a = hapo::group_advantages(&r, 0.0);
        let spread = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - r.iter().cloned().fold(f64::INFINITY, f64::min);
        prop_assume!(spread > 1e-6);
        let a = a.unwrap();
        prop_assert!(a.iter().sum::<f64>().abs() < 1e-9);
        let shifted: Vec<f64> = r.iter().map(|x| x + c).collect();
        let scaled: Vec<f64> = r.iter().map(|x| x * s).collect();
        for (x, y) in a.iter().zip(hapo::group_advantages(&shifted, 0.0).unwrap()) {
            prop_assert!((x - y).abs() < 1e-9);
        }
        for (x, y) in a.iter().zip(hapo::group_advantages(&scaled, 0.0).unwrap()) {
            prop_assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn hew_weights_are_bounded(h in prop::collection::vec(0.0..5.0f64, 1..30), lambda in 0.0..3.0f64, lo in 0.0..1.0f64, hi in 1.0..4.0f64) {
        let w = hapo::hew_weights(&h, lambda, lo, hi).unwrap();
        prop_assert!(w.iter().all(|&x| lo <= x && x <= hi));
        prop_assert!(hapo::hew_weights(&h, 0.0, lo, hi).unwrap().iter().all(|&x| x == 1.0));
    }

    #[test]
    fn pathways_agree_on_zero_hdr_slice(seed in any::<u64>(), ctx in prop::collection::vec(-2.0..2.0f64, 8), tokens in prop::collection::vec(0usize..114, 1..12)) {
        let shape = PolicyShape::default();
        prop_assume!(shape.v() == 114);
        let params = PolicyParams::random(shape, 0.5, seed);
        let mut full = vec![0.0; shape.d_hdr];
        full.extend(&ctx);
        let h = params.forward(&full, Pathway::Hdr, &tokens).unwrap();
        let s = params.forward(&full, Pathway::Sdr, &tokens).unwrap();
        for (a, b) in h.steps.iter().zip(&s.steps) {
            prop_assert_eq!(&a.logp, &b.logp);
        }
    }

    #[test]
    fn step_entropy_lies_in_zero_to_log_v(seed in any::<u64>(), sd in 0.0..5.0f64, tokens in prop::collection::vec(0usize..114, 1..12)) {
        let shape = PolicyShape::default();
        let params = PolicyParams::random(shape, sd, seed);
        let ctx = vec![0.5; shape.d_ctx()];
        let f = params.forward(&ctx, Pathway::Hdr, &tokens).unwrap();
        let ln_v = (shape.v() as f64).ln();
        for e in f.entropies() {
            prop_assert!((-1e-12..=ln_v + 1e-12).contains(&e));
        }
        let lp = f.token_logprobs(&tokens);
        for (step, (&t, l)) in f.steps.iter().zip(tokens.iter().zip(&lp)) {
            prop_assert_eq!(step.logp[t], *l);
        }
    }

    #[test]
    fn contrast_loss_is_a_hinge(hdr in prop::collection::vec(-1.0..1.0f64, 4), sdr in prop::collection::vec(-1.0..1.0f64, 4), cap in prop::collection::vec(-1.0..1.0f64, 4), delta in 0.0..1.0f64) {
        let n = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>();
        prop_assume!(n(&hdr) > 1e-6 && n(&sdr) > 1e-6 && n(&cap) > 1e-6);
        let l = encalign::contrast_loss(&hdr, &sdr, &cap, delta).unwrap();
        let gap = encalign::cosine_distance(&sdr, &cap).unwrap() - encalign::cosine_distance(&hdr, &cap).unwrap();
        prop_assert!(l >= 0.0);
        prop_assert_eq!(l == 0.0, gap >= delta);
    }
}
