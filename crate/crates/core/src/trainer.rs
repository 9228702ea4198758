//! Two-stage policy training and evaluation.
//!
//! Stage 1 updates only the context projection; Stage 2 updates every block.
//! The reference policy is frozen at the entry of each stage and the sampling
//! policy is refreshed every outer iteration.

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hapo::{self, GroupSample, HapoConfig, HapoTerms};
use crate::metrics::{self, MetricReport};
use crate::optim::{AdamConfig, AdamState};
use crate::policy::{self, Block, PolicyContext, PolicyParams};
use crate::rewards::{self, RewardBreakdown};
use crate::rng::{self, stream};

/// A context paired with the MOS it should be scored at.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub context: PolicyContext,
    pub target: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Defaults to 10% of `stage2_iters` when absent.
    pub stage1_iters: Option<usize>,
    pub stage2_iters: usize,
    pub lr: f64,
    /// Learning rate of the projection-only stage; defaults to `lr`.
    pub stage1_lr: Option<f64>,
    pub batch_size: usize,
    /// Gradient steps per sampled batch; the sampling policy is fixed across them.
    pub inner_steps: usize,
    pub seed: u64,
    /// Evaluate on the training examples every this many iterations (0 = never).
    pub eval_every: usize,
    pub stage1_blocks: Vec<Block>,
    pub adam: AdamConfig,
    /// Keep per-completion reward breakdowns in the trace.
    pub log_completions: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            stage1_iters: None,
            stage2_iters: 300,
            lr: 1e-5,
            stage1_lr: None,
            batch_size: 4,
            inner_steps: 1,
            seed: 0,
            eval_every: 0,
            stage1_blocks: vec![Block::Proj],
            adam: AdamConfig::default(),
            log_completions: true,
        }
    }
}

impl TrainConfig {
    pub fn stage1(&self) -> usize {
        self.stage1_iters.unwrap_or(self.stage2_iters / 10)
    }

    pub fn validate(&self) -> Result<()> {
        for lr in [Some(self.lr), self.stage1_lr].into_iter().flatten() {
            if !(lr > 0.0) || !lr.is_finite() {
                return Err(Error::Config(format!("learning rates must be > 0, got {lr}")));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.inner_steps == 0 {
            return Err(Error::Config("inner_steps must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionLog {
    pub context_id: String,
    pub member: usize,
    pub score: Option<u8>,
    pub cot_len: usize,
    pub reward: RewardBreakdown,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub iteration: usize,
    pub stage: u8,
    #[serde(rename = "J")]
    pub j: f64,
    pub surrogate: f64,
    pub kl_ref: f64,
    pub k_hdr: f64,
    pub h_dual: f64,
    pub mean_entropy: f64,
    pub mean_cot_len: f64,
    pub mi_diag: f64,
    pub mean_reward: f64,
    pub format_rate: f64,
    pub clip_fraction: f64,
    pub grad_norm: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval_rmse: Option<f64>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub completions: Vec<CompletionLog>,
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub params: PolicyParams,
    pub trace: Vec<TraceRecord>,
    pub optimizer: AdamState,
}

fn block_mask(params: &PolicyParams, blocks: &[Block]) -> Vec<bool> {
    let mut mask = vec![false; params.shape.n_params()];
    for &b in blocks {
        for i in params.range(b) {
            mask[i] = true;
        }
    }
    mask
}

/// Sample and score one batch with the sampling policy `old`.
pub fn rollout_batch(
    old: &PolicyParams,
    examples: &[&Example],
    cfg: &HapoConfig,
    seed: u64,
) -> Result<(Vec<GroupSample>, Vec<Vec<RewardBreakdown>>)> {
    let mut batch = Vec::with_capacity(examples.len());
    let mut breakdowns = Vec::with_capacity(examples.len());
    for ex in examples {
        let completions = policy::sample_group(old, &ex.context, cfg.k, seed)?;
        let b = rewards::group_rewards(&completions, ex.target, cfg.sigma, cfg.alpha, &cfg.reward_weights)?;
        batch.push(GroupSample { context: ex.context.clone(), rewards: b.iter().map(|r| r.total).collect(), completions });
        breakdowns.push(b);
    }
    Ok((batch, breakdowns))
}

pub fn train(examples: &[Example], init: &PolicyParams, hcfg: &HapoConfig, tcfg: &TrainConfig) -> Result<TrainOutput> {
    hcfg.validate()?;
    tcfg.validate()?;
    init.check_finite()?;
    if examples.is_empty() {
        return Err(Error::InvalidInput("no training examples".into()));
    }
    let s1 = tcfg.stage1();
    let total = s1 + tcfg.stage2_iters;
    let mut params = init.clone();
    let mut reference = init.clone();
    let mut opt = AdamState::new(params.shape.n_params());
    let stage1_mask = block_mask(&params, &tcfg.stage1_blocks);
    let mut trace = Vec::with_capacity(total);
    let bs = tcfg.batch_size.min(examples.len());

    for it in 0..total {
        let stage = if it < s1 { 1 } else { 2 };
        if it == s1 && s1 > 0 {
            reference = params.clone();
            opt = AdamState::new(params.shape.n_params());
            log::debug!("stage 2 entry at iteration {it}: reference refrozen");
        }
        let old = params.clone();
        let mut pick = rng::rng(rng::derive(tcfg.seed, &[stream::BATCH, it as u64]));
        let mut idx = index::sample(&mut pick, examples.len(), bs).into_vec();
        idx.sort_unstable();
        let chosen: Vec<&Example> = idx.iter().map(|&i| &examples[i]).collect();
        let sample_seed = rng::derive(tcfg.seed, &[stream::SAMPLING, it as u64]);
        let (batch, breakdowns) = rollout_batch(&old, &chosen, hcfg, sample_seed)?;

        let mut first: Option<(HapoTerms, f64)> = None;
        for _ in 0..tcfg.inner_steps {
            let (terms, grad) = hapo::hapo_value_and_gradient(&params, &old, &reference, &batch, hcfg)?;
            let gnorm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
            first.get_or_insert((terms, gnorm));
            let mask = (stage == 1).then_some(stage1_mask.as_slice());
            let lr = if stage == 1 { tcfg.stage1_lr.unwrap_or(tcfg.lr) } else { tcfg.lr };
            opt.ascend(&mut params.data, &grad, lr, &tcfg.adam, mask)?;
            if params.data.iter().any(|x| !x.is_finite()) {
                let last = trace.last().map(|r: &TraceRecord| serde_json::to_string(r).unwrap_or_default());
                return Err(Error::Numerical(format!(
                    "non-finite parameters after iteration {it}; objective terms {terms:?}; previous trace record {}",
                    last.unwrap_or_else(|| "none".into())
                )));
            }
        }
        let (terms, grad_norm) = first.expect("inner_steps >= 1");

        let n_comp: usize = batch.iter().map(|g| g.completions.len()).sum();
        let mi_diag = batch.iter().flat_map(|g| &g.completions).map(hapo::completion_log_ratio).sum::<f64>() / n_comp as f64;
        let mean_reward = batch.iter().flat_map(|g| &g.rewards).sum::<f64>() / n_comp as f64;
        let format_rate = breakdowns.iter().flatten().map(|b| b.r_fmt).sum::<f64>() / n_comp as f64;
        let voc = params.shape.vocab;
        let completions = if tcfg.log_completions {
            batch
                .iter()
                .zip(&breakdowns)
                .flat_map(|(g, b)| {
                    g.completions.iter().zip(b).enumerate().map(move |(m, (c, r))| CompletionLog {
                        context_id: g.context.id.clone(),
                        member: m,
                        score: c.extracted_score,
                        cot_len: voc.cot_length(&c.tokens),
                        reward: *r,
                    })
                })
                .collect()
        } else {
            Vec::new()
        };
        let eval_rmse =
            if tcfg.eval_every > 0 && (it + 1) % tcfg.eval_every == 0 { Some(evaluate(&params, examples)?.rmse) } else { None };
        trace.push(TraceRecord {
            iteration: it,
            stage,
            j: terms.j,
            surrogate: terms.surrogate,
            kl_ref: terms.kl_ref,
            k_hdr: terms.k_hdr,
            h_dual: terms.h_dual,
            mean_entropy: terms.mean_entropy,
            mean_cot_len: terms.mean_cot_len,
            mi_diag,
            mean_reward,
            format_rate,
            clip_fraction: terms.clip_fraction,
            grad_norm,
            eval_rmse,
            completions,
        });
    }
    Ok(TrainOutput { params, trace, optimizer: opt })
}

pub const FALLBACK_SCORE: f64 = 50.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    pub target: f64,
    pub predicted: f64,
    pub fallback: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Absent when the correlations are undefined (constant predictions).
    pub metrics: Option<MetricReport>,
    pub rmse: f64,
    pub fallback_fraction: f64,
    pub mean_cot_len: f64,
    pub mean_entropy: f64,
    pub predictions: Vec<Prediction>,
}

/// Greedy decoding on the HDR pathway; format-invalid outputs predict 50.
pub fn evaluate(params: &PolicyParams, examples: &[Example]) -> Result<EvalReport> {
    evaluate_with(params, examples, false)
}

/// As `evaluate`, optionally reporting PLCC after a logistic fit.
pub fn evaluate_with(params: &PolicyParams, examples: &[Example], logistic_plcc: bool) -> Result<EvalReport> {
    use rayon::prelude::*;
    if examples.len() < 2 {
        return Err(Error::InvalidInput("evaluation needs at least two examples".into()));
    }
    let voc = params.shape.vocab;
    let decoded: Vec<(Prediction, usize, f64)> = examples
        .par_iter()
        .map(|ex| {
            let c = policy::greedy(params, &ex.context)?;
            let ent = c.per_token_entropy.iter().sum::<f64>() / c.per_token_entropy.len() as f64;
            let p = Prediction {
                id: ex.context.id.clone(),
                target: ex.target,
                predicted: c.extracted_score.map_or(FALLBACK_SCORE, f64::from),
                fallback: c.extracted_score.is_none(),
            };
            Ok((p, voc.cot_length(&c.tokens), ent))
        })
        .collect::<Result<_>>()?;
    let n = decoded.len() as f64;
    let pred: Vec<f64> = decoded.iter().map(|d| d.0.predicted).collect();
    let target: Vec<f64> = decoded.iter().map(|d| d.0.target).collect();
    let report = match metrics::report(&pred, &target, logistic_plcc) {
        Ok(r) => Some(r),
        Err(Error::Undefined(why)) => {
            log::warn!("correlations undefined on evaluation: {why}");
            None
        }
        Err(e) => return Err(e),
    };
    Ok(EvalReport {
        metrics: report,
        rmse: metrics::rmse(&pred, &target)?,
        fallback_fraction: decoded.iter().filter(|d| d.0.fallback).count() as f64 / n,
        mean_cot_len: decoded.iter().map(|d| d.1 as f64).sum::<f64>() / n,
        mean_entropy: decoded.iter().map(|d| d.2).sum::<f64>() / n,
        predictions: decoded.into_iter().map(|d| d.0).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::{ContextEncoder, FormatPrior, PolicyShape};
    use crate::synthcorpus::{generate_corpus, CorpusConfig};

    fn examples(n: usize) -> Vec<Example> {
        let corpus = generate_corpus(&CorpusConfig { n, ..Default::default() }, 3).unwrap();
        let enc = ContextEncoder::fit(&corpus, false, false).unwrap();
        corpus.iter().map(|v| Example { context: enc.encode(v), target: v.true_mos }).collect()
    }

    fn init() -> PolicyParams {
        PolicyParams::format_prior(PolicyShape::default(), &FormatPrior::default(), 1).unwrap()
    }

    #[test]
    fn zero_iterations_is_identity() {
        let ex = examples(8);
        let p = init();
        let t = TrainConfig { stage1_iters: Some(0), stage2_iters: 0, ..Default::default() };
        let out = train(&ex, &p, &HapoConfig::default(), &t).unwrap();
        assert_eq!(out.params, p);
        assert!(out.trace.is_empty());
    }

    #[test]
    fn stage1_only_touches_projection() {
        let ex = examples(8);
        let p = init();
        let t = TrainConfig { stage1_iters: Some(3), stage2_iters: 0, lr: 0.01, ..Default::default() };
        let out = train(&ex, &p, &HapoConfig::default(), &t).unwrap();
        let proj = p.shape.proj_range();
        assert_eq!(&out.params.data[proj.end..], &p.data[proj.end..]);
        assert_ne!(&out.params.data[proj.clone()], &p.data[proj]);
        assert!(out.trace.iter().all(|r| r.stage == 1));
    }

    #[test]
    fn training_is_deterministic() {
        let ex = examples(8);
        let t = TrainConfig { stage1_iters: Some(1), stage2_iters: 2, lr: 0.01, ..Default::default() };
        let a = train(&ex, &init(), &HapoConfig::default(), &t).unwrap();
        let b = train(&ex, &init(), &HapoConfig::default(), &t).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(a.trace, b.trace);
    }

    #[test]
    fn exact_predictor_metrics() {
        let ex = examples(10);
        let pred: Vec<f64> = ex.iter().map(|e| e.target).collect();
        let r = metrics::report(&pred, &pred, false).unwrap();
        assert_eq!((r.srcc, r.plcc, r.krcc, r.rmse), (1.0, 1.0, 1.0, 0.0));
    }

    #[test]
    fn uniform_policy_falls_back() {
        let ex = examples(6);
        let r = evaluate(&PolicyParams::zeros(PolicyShape::default()), &ex).unwrap();
        assert_eq!(r.fallback_fraction, 1.0);
        assert!(r.metrics.is_none());
    }
}
