//! The HAPO objective and its analytic gradient.
//!
//! Per group of `K` completions:
//!
//! ```text
//! J = (1/K) sum_i (1/|o_i|) sum_t min(rho A~, clip(rho) A~)
//!     - beta k3(pi_hdr || pi_ref) + gamma k3(pi_hdr || pi_sdr) - H_dual
//! ```
//!
//! averaged over the batch. `rho` is the HDR-pathway ratio to the sampling
//! policy and `A~` the entropy-weighted group advantage.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, Error, Result};
use crate::policy::{self, entropy_from_logp, Completion, Pathway, PolicyContext, PolicyParams};
use crate::rewards::RewardWeights;
use crate::rng::{self, stream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HapoConfig {
    pub k: usize,
    /// Lower clip range; also the upper one unless `eps_clip_high` is set.
    pub eps_clip: f64,
    pub eps_clip_high: Option<f64>,
    pub eps_std: f64,
    pub beta: f64,
    pub gamma: f64,
    pub eta1: f64,
    pub eta2: f64,
    pub lambda_hew: f64,
    pub w_min: f64,
    pub w_max: f64,
    pub reward_weights: RewardWeights,
    pub sigma: f64,
    pub alpha: f64,
    /// Use `log pi(o_t)` of the sampled token in place of the Shannon entropy
    /// inside the subtracted dual-entropy term.
    pub literal_entropy: bool,
    pub k3_ratio: K3Ratio,
}

/// Which ratio the per-token k3 estimator of `KL(pi || other)` uses.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum K3Ratio {
    /// `r = pi / other`; the default for both KL terms.
    #[default]
    CurrentOverOther,
    /// `r = other / pi`, the unbiased estimator under samples from `pi`.
    OtherOverCurrent,
}

impl K3Ratio {
    /// Value of the estimator and its derivative with respect to
    /// `logp_cur - logp_other`.
    #[inline]
    pub fn eval(self, logp_cur: f64, logp_other: f64) -> (f64, f64) {
        match self {
            K3Ratio::CurrentOverOther => (k3(logp_cur, logp_other), (logp_cur - logp_other).exp_m1()),
            K3Ratio::OtherOverCurrent => (k3(logp_other, logp_cur), -(logp_other - logp_cur).exp_m1()),
        }
    }
}

impl Default for HapoConfig {
    fn default() -> Self {
        HapoConfig {
            k: 8,
            eps_clip: 0.1,
            eps_clip_high: None,
            eps_std: 1e-8,
            beta: 0.02,
            gamma: 0.5,
            eta1: 0.01,
            eta2: 0.05,
            lambda_hew: 0.3,
            w_min: 0.5,
            w_max: 2.0,
            reward_weights: RewardWeights::default(),
            sigma: 3.0,
            alpha: 1.0,
            literal_entropy: false,
            k3_ratio: K3Ratio::default(),
        }
    }
}

impl HapoConfig {
    pub fn eps_low(&self) -> f64 {
        self.eps_clip
    }

    pub fn eps_high(&self) -> f64 {
        self.eps_clip_high.unwrap_or(self.eps_clip)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.k < 2 {
            return bad(format!("k must be >= 2, got {}", self.k));
        }
        for (n, e) in [("eps_clip", self.eps_low()), ("eps_clip_high", self.eps_high())] {
            if !(e > 0.0 && e < 1.0) {
                return bad(format!("{n} must lie in (0,1), got {e}"));
            }
        }
        if !(self.w_min <= 1.0 && 1.0 <= self.w_max) {
            return bad(format!("need w_min <= 1 <= w_max, got {} and {}", self.w_min, self.w_max));
        }
        for (n, v) in [
            ("eps_std", self.eps_std),
            ("beta", self.beta),
            ("gamma", self.gamma),
            ("eta1", self.eta1),
            ("eta2", self.eta2),
            ("lambda_hew", self.lambda_hew),
        ] {
            if !v.is_finite() || v < 0.0 {
                return bad(format!("{n} must be finite and >= 0, got {v}"));
            }
        }
        if !(self.sigma > 0.0) {
            return bad(format!("sigma must be > 0, got {}", self.sigma));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return bad(format!("alpha must lie in (0,1], got {}", self.alpha));
        }
        self.reward_weights.validate()
    }
}

/// `(R - mean) / (population sd + eps_std)`.
pub fn group_advantages(rewards: &[f64], eps_std: f64) -> Result<Vec<f64>> {
    if rewards.len() < 2 {
        return Err(Error::InvalidInput(format!("group needs >= 2 rewards, got {}", rewards.len())));
    }
    ensure_finite(rewards, "rewards")?;
    let k = rewards.len() as f64;
    let mu = rewards.iter().sum::<f64>() / k;
    let sd = (rewards.iter().map(|r| (r - mu).powi(2)).sum::<f64>() / k).sqrt();
    Ok(rewards.iter().map(|r| (r - mu) / (sd + eps_std)).collect())
}

/// `clip(1 + lambda H_t / mean(H), w_min, w_max)`; all ones when the mean is zero.
pub fn hew_weights(entropies: &[f64], lambda: f64, w_min: f64, w_max: f64) -> Result<Vec<f64>> {
    if entropies.is_empty() {
        return Err(Error::InvalidInput("hew weights need at least one entropy".into()));
    }
    ensure_finite(entropies, "entropies")?;
    if entropies.iter().any(|&h| h < 0.0) {
        return Err(Error::InvalidInput("entropies must be >= 0".into()));
    }
    let mean = entropies.iter().sum::<f64>() / entropies.len() as f64;
    if mean <= 0.0 {
        return Ok(vec![1.0; entropies.len()]);
    }
    Ok(entropies.iter().map(|h| (1.0 + lambda * h / mean).clamp(w_min, w_max)).collect())
}

#[inline]
pub fn k3(logp_p: f64, logp_q: f64) -> f64 {
    let d = logp_p - logp_q;
    // r - log r - 1 with r = exp(d); expm1 keeps small |d| accurate
    d.exp_m1() - d
}

/// Mean over tokens of `r - log r - 1`, `r = p / q`, for one completion.
pub fn k3_divergence(logp_p: &[f64], logp_q: &[f64]) -> Result<f64> {
    if logp_p.len() != logp_q.len() {
        return Err(Error::Shape { expected: logp_p.len(), got: logp_q.len() });
    }
    if logp_p.is_empty() {
        return Err(Error::InvalidInput("k3 needs at least one token".into()));
    }
    ensure_finite(logp_p, "log-probabilities")?;
    ensure_finite(logp_q, "log-probabilities")?;
    Ok(logp_p.iter().zip(logp_q).map(|(&p, &q)| k3(p, q)).sum::<f64>() / logp_p.len() as f64)
}

/// Group form `(1/K) sum_i k3_divergence(p_i, q_i)`.
pub fn k3_group(pairs: &[(Vec<f64>, Vec<f64>)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::InvalidInput("empty group".into()));
    }
    let mut s = 0.0;
    for (p, q) in pairs {
        s += k3_divergence(p, q)?;
    }
    Ok(s / pairs.len() as f64)
}

/// One context with its sampled group and the group's total rewards.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSample {
    pub context: PolicyContext,
    pub completions: Vec<Completion>,
    pub rewards: Vec<f64>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct HapoTerms {
    pub j: f64,
    pub surrogate: f64,
    pub kl_ref: f64,
    pub k_hdr: f64,
    pub h_dual: f64,
    /// Mean Shannon entropy of the current HDR pathway over sampled steps.
    pub mean_entropy: f64,
    pub mean_cot_len: f64,
    /// Fraction of tokens whose clipped branch was selected.
    pub clip_fraction: f64,
}

impl HapoTerms {
    fn add_scaled(&mut self, o: &HapoTerms, s: f64) {
        self.j += s * o.j;
        self.surrogate += s * o.surrogate;
        self.kl_ref += s * o.kl_ref;
        self.k_hdr += s * o.k_hdr;
        self.h_dual += s * o.h_dual;
        self.mean_entropy += s * o.mean_entropy;
        self.mean_cot_len += s * o.mean_cot_len;
        self.clip_fraction += s * o.clip_fraction;
    }
}

/// Dual-entropy penalty of one group under `params`:
/// `(1/K) sum_i (1/|o_i|) sum_t [eta1 H(pi_hdr,t) + eta2 H(pi_sdr,t)]`.
pub fn dual_entropy(params: &PolicyParams, ctx: &PolicyContext, group: &[Completion], eta1: f64, eta2: f64) -> Result<f64> {
    if group.is_empty() {
        return Err(Error::InvalidInput("empty group".into()));
    }
    let mut s = 0.0;
    for c in group {
        if c.tokens.is_empty() {
            return Err(Error::InvalidInput("empty completion".into()));
        }
        let h = params.forward(&ctx.features, Pathway::Hdr, &c.tokens)?.entropies();
        let l = params.forward(&ctx.features, Pathway::Sdr, &c.tokens)?.entropies();
        s += h.iter().zip(&l).map(|(a, b)| eta1 * a + eta2 * b).sum::<f64>() / c.tokens.len() as f64;
    }
    Ok(s / group.len() as f64)
}

fn validate_group(g: &GroupSample, cfg: &HapoConfig) -> Result<()> {
    if g.completions.len() < 2 {
        return Err(Error::InvalidInput(format!("group for {} has {} completions", g.context.id, g.completions.len())));
    }
    if g.rewards.len() != g.completions.len() {
        return Err(Error::Shape { expected: g.completions.len(), got: g.rewards.len() });
    }
    if g.completions.len() != cfg.k {
        log::debug!("group size {} differs from configured k {}", g.completions.len(), cfg.k);
    }
    ensure_finite(&g.context.features, "context features")?;
    for c in &g.completions {
        if c.tokens.is_empty() {
            return Err(Error::InvalidInput("empty completion".into()));
        }
    }
    Ok(())
}

/// Value terms and (optionally) gradient of one group's contribution.
fn group_eval(
    params: &PolicyParams,
    params_old: &PolicyParams,
    params_ref: &PolicyParams,
    g: &GroupSample,
    cfg: &HapoConfig,
    want_grad: bool,
) -> Result<(HapoTerms, Option<Vec<f64>>)> {
    validate_group(g, cfg)?;
    let ctx = &g.context.features;
    let voc = params.shape.vocab;
    let adv = group_advantages(&g.rewards, cfg.eps_std)?;

    let old: Vec<_> = g.completions.iter().map(|c| params_old.forward(ctx, Pathway::Hdr, &c.tokens)).collect::<Result<_>>()?;
    let old_entropy: Vec<f64> = old.iter().flat_map(|f| f.entropies()).collect();
    let w_all = hew_weights(&old_entropy, cfg.lambda_hew, cfg.w_min, cfg.w_max)?;

    let k = g.completions.len() as f64;
    let (el, eh) = (cfg.eps_low(), cfg.eps_high());
    let mut terms = HapoTerms::default();
    let mut grad = want_grad.then(|| vec![0.0; params.shape.n_params()]);
    let mut offset = 0;
    let mut n_tokens = 0usize;
    let mut n_clipped = 0usize;
    for (i, c) in g.completions.iter().enumerate() {
        let n = c.tokens.len();
        let scale = 1.0 / (k * n as f64);
        let toks = &c.tokens;
        let fh = params.forward(ctx, Pathway::Hdr, toks)?;
        let fs = params.forward(ctx, Pathway::Sdr, toks)?;
        let fr = params_ref.forward(ctx, Pathway::Hdr, toks)?;
        let lp_old = old[i].token_logprobs(toks);
        let w = &w_all[offset..offset + n];
        offset += n;

        let mut dh: Vec<Vec<f64>> = Vec::new();
        let mut ds: Vec<Vec<f64>> = Vec::new();
        for t in 0..n {
            let a = toks[t];
            let lh = &fh.steps[t].logp;
            let ls = &fs.steps[t].logp;
            let lr = fr.steps[t].logp[a];
            let at = w[t] * adv[i];
            let rho = (lh[a] - lp_old[t]).exp();
            let unclipped = rho * at;
            let clipped = rho.clamp(1.0 - el, 1.0 + eh) * at;
            let take_unclipped = unclipped <= clipped;
            terms.surrogate += scale * unclipped.min(clipped);
            if !take_unclipped {
                n_clipped += 1;
            }
            let (kl_ref, d_ref) = cfg.k3_ratio.eval(lh[a], lr);
            let (k_hs, d_hs) = cfg.k3_ratio.eval(lh[a], ls[a]);
            terms.kl_ref += scale * kl_ref;
            terms.k_hdr += scale * k_hs;
            let ent_h = entropy_from_logp(lh);
            let ent_s = entropy_from_logp(ls);
            terms.h_dual += scale
                * if cfg.literal_entropy { cfg.eta1 * lh[a] + cfg.eta2 * ls[a] } else { cfg.eta1 * ent_h + cfg.eta2 * ent_s };
            terms.mean_entropy += ent_h / n as f64 / k;

            if grad.is_none() {
                continue;
            }
            // coefficients on d log pi_hdr(a) and d log pi_sdr(a)
            let mut c_h = -cfg.beta * d_ref + cfg.gamma * d_hs;
            if take_unclipped {
                c_h += at * rho;
            }
            let mut c_s = -cfg.gamma * d_hs;
            if cfg.literal_entropy {
                c_h -= cfg.eta1;
                c_s -= cfg.eta2;
            }
            let mut gh = vec![0.0; lh.len()];
            let mut gs = vec![0.0; ls.len()];
            for v in 0..lh.len() {
                let ph = lh[v].exp();
                let ps = ls[v].exp();
                let ind = if v == a { 1.0 } else { 0.0 };
                gh[v] = c_h * (ind - ph);
                gs[v] = c_s * (ind - ps);
                if !cfg.literal_entropy {
                    // -eta dH/dz_v = eta p_v (log p_v + H)
                    if ph > 0.0 {
                        gh[v] += cfg.eta1 * ph * (lh[v] + ent_h);
                    }
                    if ps > 0.0 {
                        gs[v] += cfg.eta2 * ps * (ls[v] + ent_s);
                    }
                }
                gh[v] *= scale;
                gs[v] *= scale;
            }
            dh.push(gh);
            ds.push(gs);
        }
        n_tokens += n;
        terms.mean_cot_len += voc.cot_length(toks) as f64 / k;
        if let Some(gv) = grad.as_mut() {
            params.backward(ctx, toks, &fh, &dh, gv);
            params.backward(ctx, toks, &fs, &ds, gv);
        }
    }
    terms.clip_fraction = n_clipped as f64 / n_tokens as f64;
    terms.j = terms.surrogate - cfg.beta * terms.kl_ref + cfg.gamma * terms.k_hdr - terms.h_dual;
    Ok((terms, grad))
}

fn check_shapes(params: &PolicyParams, old: &PolicyParams, reference: &PolicyParams) -> Result<()> {
    for p in [old, reference] {
        if p.shape != params.shape {
            return Err(Error::InvalidInput("policy shapes differ between current, old and reference".into()));
        }
    }
    params.check_finite()
}

fn evaluate_batch(
    params: &PolicyParams,
    params_old: &PolicyParams,
    params_ref: &PolicyParams,
    batch: &[GroupSample],
    cfg: &HapoConfig,
    want_grad: bool,
) -> Result<(HapoTerms, Option<Vec<f64>>)> {
    if batch.is_empty() {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    check_shapes(params, params_old, params_ref)?;
    let parts: Vec<(HapoTerms, Option<Vec<f64>>)> =
        batch.par_iter().map(|g| group_eval(params, params_old, params_ref, g, cfg, want_grad)).collect::<Result<_>>()?;
    // fixed-order reduction so thread count never changes the result
    let b = 1.0 / batch.len() as f64;
    let mut terms = HapoTerms::default();
    let mut grad = want_grad.then(|| vec![0.0; params.shape.n_params()]);
    for (t, g) in &parts {
        terms.add_scaled(t, b);
        if let (Some(acc), Some(g)) = (grad.as_mut(), g) {
            acc.iter_mut().zip(g).for_each(|(a, x)| *a += b * x);
        }
    }
    if !terms.j.is_finite() {
        return Err(Error::Numerical(format!("objective is not finite: {:?}", terms)));
    }
    if let Some(g) = &grad {
        if g.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numerical("gradient is not finite".into()));
        }
    }
    Ok((terms, grad))
}

pub fn hapo_objective(
    params: &PolicyParams,
    params_old: &PolicyParams,
    params_ref: &PolicyParams,
    batch: &[GroupSample],
    cfg: &HapoConfig,
) -> Result<HapoTerms> {
    Ok(evaluate_batch(params, params_old, params_ref, batch, cfg, false)?.0)
}

/// Objective terms together with the analytic gradient. At a clip boundary
/// the unclipped branch is differentiated.
pub fn hapo_value_and_gradient(
    params: &PolicyParams,
    params_old: &PolicyParams,
    params_ref: &PolicyParams,
    batch: &[GroupSample],
    cfg: &HapoConfig,
) -> Result<(HapoTerms, Vec<f64>)> {
    let (t, g) = evaluate_batch(params, params_old, params_ref, batch, cfg, true)?;
    Ok((t, g.expect("gradient requested")))
}

pub fn hapo_gradient(
    params: &PolicyParams,
    params_old: &PolicyParams,
    params_ref: &PolicyParams,
    batch: &[GroupSample],
    cfg: &HapoConfig,
) -> Result<Vec<f64>> {
    Ok(hapo_value_and_gradient(params, params_old, params_ref, batch, cfg)?.1)
}

/// Monte Carlo estimate of `E_{o ~ pi_hdr}[log pi_hdr(o) - log pi_sdr(o)]`.
pub fn mi_diagnostic(params: &PolicyParams, contexts: &[PolicyContext], n_rollouts: usize, seed: u64) -> Result<f64> {
    if n_rollouts == 0 {
        return Err(Error::InvalidInput("n_rollouts must be >= 1".into()));
    }
    if contexts.is_empty() {
        return Err(Error::InvalidInput("no contexts".into()));
    }
    let per_ctx: Vec<f64> = contexts
        .par_iter()
        .map(|ctx| {
            let mut s = 0.0;
            for r in 0..n_rollouts {
                let mut g = rng::rng(rng::derive_str(seed, &ctx.id, &[stream::MI, r as u64]));
                let c = policy::decode(params, ctx, Some(&mut g))?;
                s += completion_log_ratio(&c);
            }
            Ok(s / n_rollouts as f64)
        })
        .collect::<Result<_>>()?;
    Ok(per_ctx.iter().sum::<f64>() / contexts.len() as f64)
}

/// Sequence log-ratio between the pathways recorded on one completion.
pub fn completion_log_ratio(c: &Completion) -> f64 {
    c.pathway_logprobs_hdr.iter().zip(&c.pathway_logprobs_sdr).map(|(h, s)| h - s).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::{sample_group, FormatPrior, PolicyShape};

    #[test]
    fn advantage_examples() {
        assert_eq!(group_advantages(&[3.0; 4], 1e-8).unwrap(), vec![0.0; 4]);
        let a = group_advantages(&[0.0, 2.0], 1e-8).unwrap();
        assert!((a[0] + 1.0 / (1.0 + 1e-8)).abs() < 1e-15 && (a[1] - 1.0 / (1.0 + 1e-8)).abs() < 1e-15);
        assert!(group_advantages(&[1.0], 0.0).is_err());
    }

    #[test]
    fn hew_examples() {
        assert_eq!(hew_weights(&[0.7; 5], 0.3, 0.5, 2.0).unwrap(), vec![1.3; 5]);
        // entropy 10 against a mean of 1: raw weight 4 clips to w_max
        let mut h = vec![0.0; 10];
        h[0] = 10.0;
        assert_eq!(hew_weights(&h, 0.3, 0.5, 2.0).unwrap()[0], 2.0);
        assert_eq!(hew_weights(&[0.0, 0.0], 0.3, 0.5, 2.0).unwrap(), vec![1.0, 1.0]);
        assert_eq!(hew_weights(&[0.2, 5.0], 0.0, 0.5, 2.0).unwrap(), vec![1.0, 1.0]);
    }

    #[test]
    fn k3_examples() {
        assert_eq!(k3_divergence(&[-1.0, -2.0], &[-1.0, -2.0]).unwrap(), 0.0);
        let v = k3_divergence(&[2f64.ln()], &[0.0]).unwrap();
        assert!((v - (1.0 - 2f64.ln())).abs() < 1e-12);
        assert!(k3_divergence(&[0.0], &[f64::NAN]).is_err());
        assert!(k3_divergence(&[0.0], &[0.0, 1.0]).is_err());
    }

    fn setup(zero_hdr: bool) -> (PolicyParams, Vec<GroupSample>) {
        let shape = PolicyShape::default();
        let p = PolicyParams::format_prior(shape, &FormatPrior { noise_sd: 0.1, ..Default::default() }, 5).unwrap();
        let batch = (0..3)
            .map(|b| {
                let mut features: Vec<f64> = (0..16).map(|k| ((k + 3 * b) as f64 * 0.7).sin()).collect();
                if zero_hdr {
                    features[..8].iter_mut().for_each(|x| *x = 0.0);
                }
                let context = PolicyContext { id: format!("c{b}"), features };
                let completions = sample_group(&p, &context, 4, 11).unwrap();
                let rewards = (0..4).map(|i| (i * b) as f64 * 0.3).collect();
                GroupSample { context, completions, rewards }
            })
            .collect();
        (p, batch)
    }

    #[test]
    fn identity_policy_terms() {
        let (p, batch) = setup(true);
        let cfg = HapoConfig::default();
        let t = hapo_objective(&p, &p, &p, &batch, &cfg).unwrap();
        assert_eq!(t.kl_ref, 0.0);
        assert_eq!(t.k_hdr, 0.0);
        assert_eq!(t.clip_fraction, 0.0);
    }

    #[test]
    fn zero_everything_gives_zero_gradient() {
        let (p, mut batch) = setup(false);
        for g in &mut batch {
            g.rewards.iter_mut().for_each(|r| *r = 1.0);
        }
        let cfg = HapoConfig { beta: 0.0, gamma: 0.0, eta1: 0.0, eta2: 0.0, ..Default::default() };
        let g = hapo_gradient(&p, &p, &p, &batch, &cfg).unwrap();
        assert!(g.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn gamma_gradient_vanishes_on_zero_hdr_slices() {
        let (p, batch) = setup(true);
        let only_gamma = HapoConfig { beta: 0.0, eta1: 0.0, eta2: 0.0, ..Default::default() };
        let none = HapoConfig { gamma: 0.0, ..only_gamma.clone() };
        let a = hapo_gradient(&p, &p, &p, &batch, &only_gamma).unwrap();
        let b = hapo_gradient(&p, &p, &p, &batch, &none).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn mi_zero_for_zero_hdr() {
        let (p, batch) = setup(true);
        let ctxs: Vec<_> = batch.iter().map(|g| g.context.clone()).collect();
        assert_eq!(mi_diagnostic(&p, &ctxs, 4, 1).unwrap(), 0.0);
    }

    #[test]
    fn thread_count_does_not_change_result() {
        let (p, batch) = setup(false);
        let q = PolicyParams::random(p.shape, 0.01, 2);
        let p2 = PolicyParams { data: p.data.iter().zip(&q.data).map(|(a, b)| a + b).collect(), ..p.clone() };
        let cfg = HapoConfig::default();
        let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let a = one.install(|| hapo_value_and_gradient(&p2, &p, &p, &batch, &cfg).unwrap());
        let b = hapo_value_and_gradient(&p2, &p, &p, &batch, &cfg).unwrap();
        assert_eq!(a, b);
    }
}
