//! Central finite-difference checks of the analytic gradients.

use rand::seq::index;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::encalign::{self, EncoderConfig, EncoderParams, Triple};
use crate::error::{Error, Result};
use crate::hapo::{self, GroupSample, HapoConfig, K3Ratio};
use crate::policy::{self, FormatPrior, Pathway, PolicyContext, PolicyParams, PolicyShape};
use crate::rng::{self, stream};

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOL: f64 = 1e-4;
/// Magnitude below which errors are measured absolutely rather than relatively.
pub const ABS_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheck {
    pub label: String,
    pub n_checked: usize,
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradCheck {
    pub fn passed(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

/// `|a - f| / max(|a|, |f|, ABS_FLOOR)`.
pub fn rel_err(a: f64, f: f64) -> f64 {
    (a - f).abs() / a.abs().max(f.abs()).max(ABS_FLOOR)
}

/// Compare `analytic` with central differences of `f` on the coordinates
/// `coords`.
pub fn check_coords<F>(label: &str, f: F, x: &[f64], analytic: &[f64], coords: &[usize], step: f64) -> Result<GradCheck>
where
    F: Fn(&[f64]) -> Result<f64>,
{
    if analytic.len() != x.len() {
        return Err(Error::Shape { expected: x.len(), got: analytic.len() });
    }
    let mut worst = GradCheck {
        label: label.to_string(),
        n_checked: coords.len(),
        max_rel_err: 0.0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
    };
    let mut xp = x.to_vec();
    for &i in coords {
        let x0 = xp[i];
        xp[i] = x0 + step;
        let fp = f(&xp)?;
        xp[i] = x0 - step;
        let fm = f(&xp)?;
        xp[i] = x0;
        let num = (fp - fm) / (2.0 * step);
        let e = rel_err(analytic[i], num);
        if e > worst.max_rel_err || !e.is_finite() {
            worst.max_rel_err = if e.is_finite() { e } else { f64::INFINITY };
            worst.worst_index = i;
            worst.analytic = analytic[i];
            worst.numeric = num;
        }
    }
    Ok(worst)
}

/// Coordinates to probe: a random subset plus the largest analytic entries.
fn pick_coords(analytic: &[f64], n_random: usize, n_top: usize, r: &mut rng::Rng) -> Vec<usize> {
    let n = analytic.len();
    let mut c = index::sample(r, n, n_random.min(n)).into_vec();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| analytic[b].abs().total_cmp(&analytic[a].abs()).then(a.cmp(&b)));
    c.extend(order.into_iter().take(n_top));
    c.sort_unstable();
    c.dedup();
    c
}

/// A random HAPO instance: perturbed format-prior policy, nearby sampling and
/// reference policies, random rewards and hyperparameters.
pub struct HapoInstance {
    pub params: PolicyParams,
    pub old: PolicyParams,
    pub reference: PolicyParams,
    pub batch: Vec<GroupSample>,
    pub cfg: HapoConfig,
}

/// Instances with an importance ratio closer than this to a clip boundary are
/// redrawn: a central difference straddling the kink measures the mean of the
/// two one-sided slopes, not the selected branch.
pub const MIN_CLIP_MARGIN: f64 = 1e-3;

/// A random instance away from the clip kinks; redraws until one is found.
pub fn random_hapo_instance(seed: u64) -> Result<HapoInstance> {
    for attempt in 0..100u64 {
        let inst = draw_hapo_instance(if attempt == 0 { seed } else { rng::derive(seed, &[stream::GRADCHECK, attempt]) })?;
        if clip_margin(&inst)? >= MIN_CLIP_MARGIN {
            return Ok(inst);
        }
    }
    Err(Error::Numerical(format!("no kink-free instance found for seed {seed}")))
}

/// One unconditioned draw; may sit on a clip kink.
pub fn draw_hapo_instance(seed: u64) -> Result<HapoInstance> {
    let mut r = rng::rng(rng::derive(seed, &[stream::INIT, 99]));
    let shape = PolicyShape::default();
    let prior = FormatPrior { noise_sd: 0.3, proj_init_sd: 0.1, margin: 4.0, ..Default::default() };
    let old = PolicyParams::format_prior(shape, &prior, seed)?;
    let jitter = |p: &PolicyParams, sd: f64, s: u64| -> PolicyParams {
        let n = PolicyParams::random(p.shape, sd, s);
        PolicyParams { shape: p.shape, data: p.data.iter().zip(&n.data).map(|(a, b)| a + b).collect() }
    };
    let params = jitter(&old, 0.05, rng::derive(seed, &[1]));
    let reference = jitter(&old, 0.05, rng::derive(seed, &[2]));
    let k = r.random_range(2..=5usize);
    let n_groups = r.random_range(1..=3usize);
    let mut batch = Vec::with_capacity(n_groups);
    for g in 0..n_groups {
        let features: Vec<f64> = (0..shape.d_ctx()).map(|_| r.random_range(-1.0..1.0)).collect();
        let context = PolicyContext { id: format!("gc{seed}-{g}"), features };
        let completions = policy::sample_group(&old, &context, k, rng::derive(seed, &[3, g as u64]))?;
        let rewards = (0..k).map(|_| r.random_range(0.0..1.5)).collect();
        batch.push(GroupSample { context, completions, rewards });
    }
    let cfg = HapoConfig {
        k,
        eps_clip: r.random_range(0.05..0.3),
        eps_clip_high: r.random_bool(0.5).then(|| r.random_range(0.05..0.4)),
        beta: r.random_range(0.0..0.5),
        gamma: r.random_range(0.0..1.0),
        eta1: r.random_range(0.0..0.1),
        eta2: r.random_range(0.0..0.1),
        lambda_hew: r.random_range(0.0..0.6),
        literal_entropy: r.random_bool(0.25),
        k3_ratio: if r.random_bool(0.25) { K3Ratio::OtherOverCurrent } else { K3Ratio::CurrentOverOther },
        ..Default::default()
    };
    Ok(HapoInstance { params, old, reference, batch, cfg })
}

/// Smallest distance of any token's importance ratio from a clip boundary.
pub fn clip_margin(inst: &HapoInstance) -> Result<f64> {
    let (lo, hi) = (1.0 - inst.cfg.eps_low(), 1.0 + inst.cfg.eps_high());
    let mut m = f64::INFINITY;
    for g in &inst.batch {
        for c in &g.completions {
            let cur = inst.params.forward(&g.context.features, Pathway::Hdr, &c.tokens)?.token_logprobs(&c.tokens);
            for (a, b) in cur.iter().zip(&c.old_logprobs) {
                let rho = (a - b).exp();
                m = m.min((rho - lo).abs()).min((rho - hi).abs());
            }
        }
    }
    Ok(m)
}

pub fn check_hapo(seed: u64, step: f64) -> Result<GradCheck> {
    let inst = random_hapo_instance(seed)?;
    let (_, grad) = hapo::hapo_value_and_gradient(&inst.params, &inst.old, &inst.reference, &inst.batch, &inst.cfg)?;
    let mut r = rng::rng(rng::derive(seed, &[stream::INIT, 98]));
    let coords = pick_coords(&grad, 48, 16, &mut r);
    let f = |x: &[f64]| {
        let p = PolicyParams { shape: inst.params.shape, data: x.to_vec() };
        Ok(hapo::hapo_objective(&p, &inst.old, &inst.reference, &inst.batch, &inst.cfg)?.j)
    };
    check_coords(&format!("hapo seed {seed}"), f, &inst.params.data, &grad, &coords, step)
}

pub fn random_encoder_instance(seed: u64) -> (EncoderParams, Vec<Triple>, EncoderConfig) {
    let mut r = rng::rng(rng::derive(seed, &[stream::ENCODER, 99]));
    let cfg = EncoderConfig {
        d_emb: 6,
        d_cap: 4,
        delta: r.random_range(0.0..0.6),
        lambda_ctr: r.random_range(0.0..1.0),
        t_init: r.random_range(0.5..5.0),
        b_init: r.random_range(-2.0..2.0),
        init_sd: 0.5,
        reversed_contrast_sign: r.random_bool(0.3),
        ..Default::default()
    };
    let n = r.random_range(2..=6usize);
    let triples = (0..n)
        .map(|_| Triple {
            hdr: (0..8).map(|_| r.random_range(0.0..1.0)).collect(),
            sdr: (0..8).map(|_| r.random_range(0.0..1.0)).collect(),
            caption: (0..cfg.d_cap).map(|_| r.random_range(-1.0..1.0)).collect(),
        })
        .collect();
    (EncoderParams::init(8, &cfg, seed), triples, cfg)
}

pub fn check_encalign(seed: u64, step: f64) -> Result<GradCheck> {
    let (p, triples, cfg) = random_encoder_instance(seed);
    let batch: Vec<&Triple> = triples.iter().collect();
    let (_, grad) = encalign::enc_loss_and_grad(&p, &batch, &cfg)?;
    let x = p.to_flat();
    let coords: Vec<usize> = (0..x.len()).collect();
    let f = |v: &[f64]| Ok(encalign::enc_loss_and_grad(&p.from_flat(v), &batch, &cfg)?.0.total);
    check_coords(&format!("encalign seed {seed}"), f, &x, &grad, &coords, step)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Module {
    Hapo,
    Encalign,
}

/// Run `n_seeds` checks of one module starting at `base_seed`.
pub fn run(module: Module, base_seed: u64, n_seeds: usize, step: f64) -> Result<Vec<GradCheck>> {
    (0..n_seeds as u64)
        .map(|k| {
            let s = rng::derive(base_seed, &[stream::GRADCHECK, k]);
            match module {
                Module::Hapo => check_hapo(s, step),
                Module::Encalign => check_encalign(s, step),
            }
        })
        .collect()
}
