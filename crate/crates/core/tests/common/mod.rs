//! Independent reference implementations used as test oracles. Each one is
//! written directly from the defining formula, without calling the library
//! routine it checks.

#![allow(dead_code)]

use hapo_core::hapo::GroupSample;
use hapo_core::policy::PolicyShape;

/// Straight-line log-softmax policy. `hdr` selects the full context; the SDR
/// pathway drops the first `d_hdr` context features.
pub fn oracle_logprobs(shape: &PolicyShape, data: &[f64], ctx: &[f64], tokens: &[usize], hdr: bool) -> Vec<f64> {
    let de = shape.d_emb;
    let dc = shape.d_hdr + shape.d_sdr;
    let v = shape.vocab.size();
    let proj = &data[..de * dc];
    let tok = &data[de * dc..de * dc + v * de];
    let pos = &data[de * dc + v * de..de * dc + v * de + shape.t_max * de];
    let out = &data[de * dc + v * de + shape.t_max * de..];
    let first = if hdr { 0 } else { shape.d_hdr };
    let mut z = vec![0.0; de];
    for r in 0..de {
        for c in first..dc {
            z[r] += proj[r * dc + c] * ctx[c];
        }
    }
    let mut lps = Vec::new();
    for (t, &a) in tokens.iter().enumerate() {
        let mut h = z.clone();
        for k in 0..de {
            h.push(if t == 0 { 0.0 } else { tok[tokens[t - 1] * de + k] });
        }
        for k in 0..de {
            h.push(pos[t * de + k]);
        }
        let logits: Vec<f64> = (0..v).map(|u| (0..3 * de).map(|k| out[u * 3 * de + k] * h[k]).sum::<f64>()).collect();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
        lps.push(logits[a] - lse);
    }
    lps
}

/// GRPO objective: clipped surrogate with group-normalised advantages minus
/// `beta` times the per-token k3 reference penalty. `inverse_ratio` selects
/// `r = pi_ref / pi` instead of `r = pi / pi_ref`.
#[allow(clippy::too_many_arguments)]
pub fn grpo_objective(
    shape: &PolicyShape,
    params: &[f64],
    old: &[f64],
    reference: &[f64],
    batch: &[GroupSample],
    eps_low: f64,
    eps_high: f64,
    eps_std: f64,
    beta: f64,
    inverse_ratio: bool,
) -> f64 {
    let mut total = 0.0;
    for g in batch {
        let k = g.rewards.len() as f64;
        let mean = g.rewards.iter().sum::<f64>() / k;
        let var = g.rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / k;
        let mut group = 0.0;
        for (c, &r) in g.completions.iter().zip(&g.rewards) {
            let adv = (r - mean) / (var.sqrt() + eps_std);
            let cur = oracle_logprobs(shape, params, &g.context.features, &c.tokens, true);
            let prev = oracle_logprobs(shape, old, &g.context.features, &c.tokens, true);
            let refp = oracle_logprobs(shape, reference, &g.context.features, &c.tokens, true);
            let mut s = 0.0;
            for t in 0..c.tokens.len() {
                let rho = (cur[t] - prev[t]).exp();
                let clipped = if rho < 1.0 - eps_low {
                    1.0 - eps_low
                } else if rho > 1.0 + eps_high {
                    1.0 + eps_high
                } else {
                    rho
                };
                let surrogate = (rho * adv).min(clipped * adv);
                let ratio = if inverse_ratio { (refp[t] - cur[t]).exp() } else { (cur[t] - refp[t]).exp() };
                let kl = ratio - ratio.ln() - 1.0;
                s += surrogate - beta * kl;
            }
            group += s / c.tokens.len() as f64;
        }
        total += group / k;
    }
    total / batch.len() as f64
}

/// Tie-averaged rank by counting: `1 + #smaller + (#equal - 1) / 2`.
pub fn count_ranks(x: &[f64]) -> Vec<f64> {
    x.iter()
        .map(|&a| {
            let smaller = x.iter().filter(|&&b| b < a).count() as f64;
            let equal = x.iter().filter(|&&b| b == a).count() as f64;
            1.0 + smaller + (equal - 1.0) / 2.0
        })
        .collect()
}

/// Textbook Pearson correlation; `None` for a constant input.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    let syy: f64 = y.iter().map(|b| (b - my) * (b - my)).sum();
    if sxx == 0.0 || syy == 0.0 {
        None
    } else {
        Some(sxy / (sxx * syy).sqrt())
    }
}

pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    pearson(&count_ranks(x), &count_ranks(y))
}

/// Kendall tau-b by enumerating all pairs.
pub fn kendall_tau_b(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len();
    let (mut conc, mut disc, mut tie_x, mut tie_y) = (0i64, 0i64, 0i64, 0i64);
    for i in 0..n {
        for j in i + 1..n {
            let dx = x[i] - x[j];
            let dy = y[i] - y[j];
            if dx == 0.0 {
                tie_x += 1;
            }
            if dy == 0.0 {
                tie_y += 1;
            }
            if dx != 0.0 && dy != 0.0 {
                if (dx > 0.0) == (dy > 0.0) {
                    conc += 1;
                } else {
                    disc += 1;
                }
            }
        }
    }
    let n0 = (n * (n - 1) / 2) as i64;
    let den = ((n0 - tie_x) as f64 * (n0 - tie_y) as f64).sqrt();
    if den == 0.0 {
        None
    } else {
        Some((conc - disc) as f64 / den)
    }
}

/// Self-reward by counting: a member is rewarded when it carries a score, no
/// other score occurs more often (or equally often while being smaller), and
/// the format-invalid members do not outnumber it.
pub fn self_reward_oracle(scores: &[Option<u8>]) -> Vec<f64> {
    let count = |v: Option<u8>| scores.iter().filter(|&&s| s == v).count();
    scores
        .iter()
        .map(|&s| match s {
            None => 0.0,
            Some(a) => {
                let mine = count(Some(a));
                let beaten = scores.iter().flatten().any(|&b| {
                    let theirs = count(Some(b));
                    theirs > mine || (theirs == mine && b < a)
                });
                if beaten || count(None) > mine {
                    0.0
                } else {
                    1.0
                }
            }
        })
        .collect()
}

/// Pairwise sigmoid loss by explicit double loop.
pub fn sigmoid_loss_oracle(frames: &[Vec<f64>], caps: &[Vec<f64>], t: f64, b: f64) -> f64 {
    let cos = |a: &[f64], c: &[f64]| {
        let dot: f64 = a.iter().zip(c).map(|(p, q)| p * q).sum();
        let na: f64 = a.iter().map(|p| p * p).sum::<f64>().sqrt();
        let nc: f64 = c.iter().map(|q| q * q).sum::<f64>().sqrt();
        dot / (na * nc)
    };
    let n = frames.len();
    let mut s = 0.0;
    for i in 0..n {
        for j in 0..n {
            let z = if i == j { 1.0 } else { -1.0 };
            let arg = z * (t * cos(&frames[i], &caps[j]) + b);
            s += -(1.0 / (1.0 + (-arg).exp())).ln();
        }
    }
    s / (n * n) as f64
}

/// All vectors of length `n` over `alphabet`, in lexicographic order.
pub fn all_vectors(alphabet: &[f64], n: usize) -> Vec<Vec<f64>> {
    let mut out = vec![Vec::new()];
    for _ in 0..n {
        out = out
            .into_iter()
            .flat_map(|v| {
                alphabet.iter().map(move |&a| {
                    let mut w = v.clone();
                    w.push(a);
                    w
                })
            })
            .collect();
    }
    out
}

/// Relative difference with an absolute floor of 1.
pub fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0)
}
