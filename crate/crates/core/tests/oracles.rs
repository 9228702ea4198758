//! Library routines against the independent reference implementations.

mod common;

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;

use hapo_core::encalign;
use hapo_core::hapo;
use hapo_core::metrics;
use hapo_core::policy::{Pathway, PolicyParams, PolicyShape};

fn random_vec(r: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| r.random_range(-scale..scale)).collect()
}

#[test]
fn forward_pass_matches_straight_line_softmax() {
    let mut r = ChaCha8Rng::seed_from_u64(1);
    let shape = PolicyShape::default();
    for seed in 0..20 {
        let params = PolicyParams::random(shape, 0.3, seed);
        let ctx = random_vec(&mut r, shape.d_ctx(), 1.0);
        let len = r.random_range(1..=shape.t_max);
        let tokens: Vec<usize> = (0..len).map(|_| r.random_range(0..shape.v())).collect();
        for (pathway, hdr) in [(Pathway::Hdr, true), (Pathway::Sdr, false)] {
            let got = params.forward(&ctx, pathway, &tokens).unwrap().token_logprobs(&tokens);
            let want = common::oracle_logprobs(&shape, &params.data, &ctx, &tokens, hdr);
            for (a, b) in got.iter().zip(&want) {
                assert!((a - b).abs() < 1e-12, "{pathway:?} seed {seed}: {a} vs {b}");
            }
        }
    }
}

#[test]
fn sigmoid_loss_matches_double_loop() {
    let mut r = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..200 {
        let n = r.random_range(1..8);
        let d = r.random_range(2..6);
        let frames: Vec<Vec<f64>> = (0..n).map(|_| random_vec(&mut r, d, 1.0)).collect();
        let caps: Vec<Vec<f64>> = (0..n).map(|_| random_vec(&mut r, d, 1.0)).collect();
        let t = r.random_range(0.1..20.0);
        let b = r.random_range(-10.0..2.0);
        let got = encalign::sigmoid_align_loss(&frames, &caps, t, b).unwrap();
        let want = common::sigmoid_loss_oracle(&frames, &caps, t, b);
        assert!(common::close(got, want, 1e-12), "{got} vs {want}");
    }
}

#[test]
fn ranks_and_pearson_match_counting_definitions() {
    let mut r = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..2000 {
        let n = r.random_range(3..30);
        // coarse values force ties
        let x: Vec<f64> = (0..n).map(|_| r.random_range(0..6) as f64).collect();
        let y: Vec<f64> = (0..n).map(|_| r.random_range(-50.0..50.0)).collect();
        assert_eq!(metrics::average_ranks(&x), common::count_ranks(&x));
        match (metrics::plcc(&x, &y).ok(), common::pearson(&x, &y)) {
            (Some(a), Some(b)) => assert!((a - b).abs() < 1e-12),
            (a, b) => assert_eq!(a.is_some(), b.is_some()),
        }
        match (metrics::krcc(&x, &y).ok(), common::kendall_tau_b(&x, &y)) {
            (Some(a), Some(b)) => assert!((a - b).abs() < 1e-12),
            (a, b) => assert_eq!(a.is_some(), b.is_some()),
        }
    }
}

#[test]
fn group_advantages_match_population_z_scores() {
    let mut r = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..500 {
        let k = r.random_range(2..12);
        let rewards = random_vec(&mut r, k, 3.0);
        let got = hapo::group_advantages(&rewards, 1e-8).unwrap();
        let mean = rewards.iter().sum::<f64>() / k as f64;
        let sd = (rewards.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / k as f64).sqrt();
        for (a, x) in got.iter().zip(&rewards) {
            assert!((a - (x - mean) / (sd + 1e-8)).abs() < 1e-12);
        }
    }
}

#[test]
fn k3_divergence_is_token_mean_of_k3() {
    let mut r = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..500 {
        let n = r.random_range(1..20);
        let p = random_vec(&mut r, n, 5.0);
        let q = random_vec(&mut r, n, 5.0);
        let want = p.iter().zip(&q).map(|(a, b)| (a - b).exp() - (a - b) - 1.0).sum::<f64>() / n as f64;
        assert!(common::close(hapo::k3_divergence(&p, &q).unwrap(), want, 1e-12));
    }
}
