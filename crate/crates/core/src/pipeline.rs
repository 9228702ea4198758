//! End-to-end experiment: corpus, study, QC, SUREAL targets, policy training,
//! held-out evaluation, and the component ablation grid.

use std::collections::BTreeMap;
use std::io::Write;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::encalign::{self, EncoderRun};
use crate::error::{Error, Result};
use crate::hapo;
use crate::metrics;
use crate::optim::AdamState;
use crate::policy::{Checkpoint, ContextEncoder, PolicyContext, PolicyParams};
use crate::rng::{self, stream};
use crate::studysim::{self, QcOutcome, RatingRecord, Study};
use crate::sureal::{self, SurealEstimate};
use crate::synthcorpus::{self, VideoInstance};
use crate::trainer::{self, EvalReport, Example, TraceRecord};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Everything upstream of policy training.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub corpus: Vec<VideoInstance>,
    pub study: Study,
    pub qc: QcOutcome,
    pub sureal: SurealEstimate,
}

impl Dataset {
    pub fn mos(&self) -> &BTreeMap<String, f64> {
        &self.sureal.psi
    }
}

pub fn prepare_data(cfg: &ExperimentConfig) -> Result<Dataset> {
    let corpus = synthcorpus::generate_corpus(&cfg.corpus, cfg.seed)?;
    let subjects = studysim::sample_subjects(&cfg.study.population, cfg.seed);
    let study = studysim::run_study(&corpus, &subjects, &cfg.study.design, &cfg.study.pilot_population, cfg.seed)?;
    let qc = studysim::qc_screen(&study.records, &study.golden_truth, &cfg.qc)?;
    let sureal = sureal::fit_with(&sureal_input(&qc.accepted), &cfg.sureal)?;
    Ok(Dataset { corpus, study, qc, sureal })
}

/// Accepted ratings minus golden videos left with fewer than two ratings
/// after screening; those carry no usable MOS evidence.
pub fn sureal_input(accepted: &[RatingRecord]) -> Vec<RatingRecord> {
    let mut golden_counts: BTreeMap<&str, usize> = BTreeMap::new();
    for r in accepted.iter().filter(|r| r.is_golden) {
        *golden_counts.entry(&r.video_id).or_default() += 1;
    }
    accepted.iter().filter(|r| !r.is_golden || golden_counts[r.video_id.as_str()] >= 2).cloned().collect()
}

/// Deterministic train/test partition of sorted video ids. Both sides keep at
/// least two videos.
pub fn split_ids(ids: &[String], test_fraction: f64, seed: u64) -> Result<(Vec<String>, Vec<String>)> {
    let mut sorted = ids.to_vec();
    sorted.sort();
    sorted.dedup();
    let n = sorted.len();
    if n < 4 {
        return Err(Error::InvalidInput(format!("need at least 4 videos to split, got {n}")));
    }
    let n_test = ((n as f64 * test_fraction).round() as usize).clamp(2, n - 2);
    sorted.shuffle(&mut rng::rng(rng::derive(seed, &[stream::SPLIT, 0])));
    let mut test = sorted.split_off(n - n_test);
    sorted.sort();
    test.sort();
    Ok((sorted, test))
}

/// Pair each video with its MOS; every video must have one.
pub fn examples(videos: &[&VideoInstance], encoder: &ContextEncoder, mos: &BTreeMap<String, f64>) -> Result<Vec<Example>> {
    videos
        .iter()
        .map(|v| {
            let target = *mos.get(&v.id).ok_or_else(|| Error::InvalidInput(format!("no MOS for video {}", v.id)))?;
            Ok(Example { context: encoder.encode(v), target })
        })
        .collect()
}

fn select<'a>(corpus: &'a [VideoInstance], ids: &[String]) -> Vec<&'a VideoInstance> {
    let wanted: std::collections::BTreeSet<&str> = ids.iter().map(String::as_str).collect();
    corpus.iter().filter(|v| wanted.contains(v.id.as_str())).collect()
}

#[derive(Debug, Clone)]
pub struct PolicyRun {
    pub params: PolicyParams,
    pub encoder: ContextEncoder,
    pub trace: Vec<TraceRecord>,
    pub optimizer: AdamState,
    pub train_ids: Vec<String>,
    pub held_out: Vec<String>,
}

impl PolicyRun {
    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint { held_out: self.held_out.clone(), ..Checkpoint::new(&self.params, &self.encoder) }
    }
}

/// Split the corpus, fit the context encoder on the training side, and train
/// a policy from the format prior against `mos`.
pub fn train_policy(cfg: &ExperimentConfig, corpus: &[VideoInstance], mos: &BTreeMap<String, f64>) -> Result<PolicyRun> {
    let ids: Vec<String> = corpus.iter().map(|v| v.id.clone()).filter(|id| mos.contains_key(id)).collect();
    let (train_ids, held_out) = split_ids(&ids, cfg.eval.test_fraction, cfg.seed)?;
    let train_videos = select(corpus, &train_ids);
    let encoder = ContextEncoder::fit_refs(&train_videos, cfg.policy.standardize, cfg.policy.hdr_blind)?;
    let train_ex = examples(&train_videos, &encoder, mos)?;
    let mut prior = cfg.policy.prior.clone();
    if cfg.policy.center_on_targets {
        prior.center = train_ex.iter().map(|e| e.target).sum::<f64>() / train_ex.len() as f64;
    }
    let shape = cfg.policy.shape(cfg.corpus.d_hdr);
    let init = PolicyParams::format_prior(shape, &prior, cfg.train.seed)?;
    let out = trainer::train(&train_ex, &init, &cfg.hapo, &cfg.train)?;
    Ok(PolicyRun { params: out.params, encoder, trace: out.trace, optimizer: out.optimizer, train_ids, held_out })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub eval: EvalReport,
    pub mi_diagnostic: f64,
}

/// Greedy evaluation against `mos` plus the pathway diagnostic on the same
/// contexts.
pub fn evaluate_policy(
    params: &PolicyParams,
    encoder: &ContextEncoder,
    videos: &[&VideoInstance],
    mos: &BTreeMap<String, f64>,
    cfg: &ExperimentConfig,
) -> Result<Evaluation> {
    let ex = examples(videos, encoder, mos)?;
    let eval = trainer::evaluate_with(params, &ex, cfg.eval.logistic_plcc)?;
    let contexts: Vec<PolicyContext> = ex.into_iter().map(|e| e.context).collect();
    let mi = hapo::mi_diagnostic(params, &contexts, cfg.eval.mi_rollouts, rng::derive(cfg.train.seed, &[stream::MI]))?;
    Ok(Evaluation { eval, mi_diagnostic: mi })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataSummary {
    pub n_videos: usize,
    pub n_ratings: usize,
    pub n_subjects: usize,
    pub n_rejected_subjects: usize,
    pub n_accepted_ratings: usize,
    pub sureal_iterations: usize,
    pub sureal_converged: bool,
    pub sureal_loglik: f64,
    /// RMSE of the recovered MOS against the simulator's latent MOS.
    pub mos_rmse_vs_latent: f64,
}

impl DataSummary {
    pub fn of(data: &Dataset) -> Result<Self> {
        let (est, truth): (Vec<f64>, Vec<f64>) =
            data.corpus.iter().filter_map(|v| data.sureal.psi.get(&v.id).map(|p| (*p, v.true_mos))).unzip();
        let mut subjects: Vec<&str> = data.study.records.iter().map(|r| r.subject_id.as_str()).collect();
        subjects.sort_unstable();
        subjects.dedup();
        Ok(DataSummary {
            n_videos: data.corpus.len(),
            n_ratings: data.study.records.len(),
            n_subjects: subjects.len(),
            n_rejected_subjects: data.qc.rejections.len(),
            n_accepted_ratings: data.qc.accepted.len(),
            sureal_iterations: data.sureal.iterations,
            sureal_converged: data.sureal.converged,
            sureal_loglik: data.sureal.loglik,
            mos_rmse_vs_latent: metrics::rmse(&est, &truth)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub train_seed: u64,
    pub n_train: usize,
    pub n_test: usize,
    pub iterations: usize,
    /// Mean batch reward over the first and last tenth of the iterations.
    pub mean_reward_start: f64,
    pub mean_reward_end: f64,
    pub last: Option<TraceRecord>,
}

impl TrainSummary {
    pub fn of(run: &PolicyRun, train_seed: u64) -> Self {
        let n = run.trace.len();
        let w = (n / 10).max(1).min(n);
        let mean = |s: &[TraceRecord]| {
            if s.is_empty() {
                0.0
            } else {
                s.iter().map(|r| r.mean_reward).sum::<f64>() / s.len() as f64
            }
        };
        TrainSummary {
            train_seed,
            n_train: run.train_ids.len(),
            n_test: run.held_out.len(),
            iterations: n,
            mean_reward_start: mean(&run.trace[..w]),
            mean_reward_end: mean(&run.trace[n - w..]),
            last: run.trace.last().map(|r| TraceRecord { completions: Vec::new(), ..r.clone() }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderSummary {
    pub final_loss: f64,
    pub collapsed: bool,
    /// Mean cosine distance to the caption on held-out videos.
    pub hdr_caption_distance: f64,
    pub sdr_caption_distance: f64,
}

/// Versioned report. Sections other than `eval` are present when the report
/// comes from a full pipeline run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub schema_version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data: Option<DataSummary>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<TrainSummary>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub encoder: Option<EncoderSummary>,
    pub eval: EvalReport,
    pub mi_diagnostic: f64,
}

impl Report {
    pub fn from_evaluation(e: Evaluation) -> Self {
        Report {
            schema_version: REPORT_SCHEMA_VERSION,
            seed: None,
            data: None,
            train: None,
            encoder: None,
            eval: e.eval,
            mi_diagnostic: e.mi_diagnostic,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }
}

/// Train the alignment encoder on the training videos and measure caption
/// distances on the held-out ones.
pub fn run_encoder(cfg: &ExperimentConfig, corpus: &[VideoInstance], run: &PolicyRun) -> Result<(EncoderRun, EncoderSummary)> {
    let seed = cfg.train.seed;
    let train: Vec<VideoInstance> = select(corpus, &run.train_ids).into_iter().cloned().collect();
    let test: Vec<VideoInstance> = select(corpus, &run.held_out).into_iter().cloned().collect();
    let content = cfg.corpus.content.clone();
    let tr = encalign::make_triples(&train, content.clone(), &cfg.encoder, seed)?;
    let te = encalign::make_triples(&test, content, &cfg.encoder, rng::derive(seed, &[1]))?;
    let er = encalign::train_encoder(&tr, &cfg.encoder, seed)?;
    let (dh, ds) = encalign::caption_distances(&er.params, &te)?;
    let summary = EncoderSummary {
        final_loss: er.curve.last().map_or(f64::NAN, |c| c.total),
        collapsed: er.collapsed,
        hdr_caption_distance: dh,
        sdr_caption_distance: ds,
    };
    Ok((er, summary))
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub data: Dataset,
    pub policy: PolicyRun,
    pub encoder: Option<EncoderRun>,
    pub report: Report,
}

pub fn run_pipeline(cfg: &ExperimentConfig) -> Result<PipelineOutput> {
    cfg.validate()?;
    let data = prepare_data(cfg)?;
    let policy = train_policy(cfg, &data.corpus, data.mos())?;
    let test = select(&data.corpus, &policy.held_out);
    let ev = evaluate_policy(&policy.params, &policy.encoder, &test, data.mos(), cfg)?;
    let (encoder, enc_summary) = if cfg.eval.encoder {
        let (r, s) = run_encoder(cfg, &data.corpus, &policy)?;
        (Some(r), Some(s))
    } else {
        (None, None)
    };
    let report = Report {
        seed: Some(cfg.seed),
        data: Some(DataSummary::of(&data)?),
        train: Some(TrainSummary::of(&policy, cfg.train.seed)),
        encoder: enc_summary,
        ..Report::from_evaluation(ev)
    };
    Ok(PipelineOutput { data, policy, encoder, report })
}

/// Component on/off settings of the ablation grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    /// Tone-mapped features in the HDR slice.
    NoHdrEncoder,
    /// gamma = 0.
    NoContrastiveKl,
    /// eta1 = eta2 = 0.
    NoDualEntropy,
    /// lambda_hew = 0.
    NoHew,
    /// Self-reward weight 0.
    NoSelfReward,
    /// Every HAPO component off: plain GRPO with format and score rewards.
    Grpo,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::Full,
        Variant::NoHdrEncoder,
        Variant::NoContrastiveKl,
        Variant::NoDualEntropy,
        Variant::NoHew,
        Variant::NoSelfReward,
        Variant::Grpo,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoHdrEncoder => "no_hdr_encoder",
            Variant::NoContrastiveKl => "no_contrastive_kl",
            Variant::NoDualEntropy => "no_dual_entropy",
            Variant::NoHew => "no_hew",
            Variant::NoSelfReward => "no_self_reward",
            Variant::Grpo => "grpo",
        }
    }

    pub fn apply(&self, base: &ExperimentConfig) -> ExperimentConfig {
        let mut c = base.clone();
        let no_kl = |c: &mut ExperimentConfig| c.hapo.gamma = 0.0;
        let no_ent = |c: &mut ExperimentConfig| {
            c.hapo.eta1 = 0.0;
            c.hapo.eta2 = 0.0;
        };
        let no_hew = |c: &mut ExperimentConfig| c.hapo.lambda_hew = 0.0;
        let no_self = |c: &mut ExperimentConfig| c.hapo.reward_weights.w_self = 0.0;
        match self {
            Variant::Full => {}
            Variant::NoHdrEncoder => c.policy.hdr_blind = true,
            Variant::NoContrastiveKl => no_kl(&mut c),
            Variant::NoDualEntropy => no_ent(&mut c),
            Variant::NoHew => no_hew(&mut c),
            Variant::NoSelfReward => no_self(&mut c),
            Variant::Grpo => {
                no_kl(&mut c);
                no_ent(&mut c);
                no_hew(&mut c);
                no_self(&mut c);
            }
        }
        c
    }
}

/// One training run of the grid. Correlations are NaN when undefined.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRun {
    pub variant: Variant,
    pub train_seed: u64,
    pub plcc: f64,
    pub srcc: f64,
    pub rmse: f64,
    pub krcc: f64,
    pub mean_cot_len: f64,
    pub mean_entropy: f64,
    pub mi_diagnostic: f64,
    pub fallback_fraction: f64,
}

/// Seed-averaged row of the ablation table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub n_seeds: usize,
    pub plcc: f64,
    pub srcc: f64,
    pub rmse: f64,
    pub krcc: f64,
    pub mean_cot_len: f64,
    pub mean_entropy: f64,
    pub mi_diagnostic: f64,
    pub fallback_fraction: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ablation {
    pub runs: Vec<AblationRun>,
    pub rows: Vec<AblationRow>,
}

impl Ablation {
    /// Runs of one variant ordered by training seed.
    pub fn runs_of(&self, v: Variant) -> Vec<&AblationRun> {
        self.runs.iter().filter(|r| r.variant == v).collect()
    }
}

/// Train every variant on `eval.paired_seeds` training seeds starting at
/// `train.seed`. The data and the split are shared by all runs.
pub fn ablate(cfg: &ExperimentConfig, variants: &[Variant]) -> Result<Ablation> {
    cfg.validate()?;
    let data = prepare_data(cfg)?;
    ablate_on(cfg, &data, variants)
}

pub fn ablate_on(cfg: &ExperimentConfig, data: &Dataset, variants: &[Variant]) -> Result<Ablation> {
    let mut runs = Vec::new();
    for &v in variants {
        for k in 0..cfg.eval.paired_seeds as u64 {
            let mut c = v.apply(cfg);
            c.train.seed = cfg.train.seed.wrapping_add(k);
            let run = train_policy(&c, &data.corpus, data.mos())?;
            let test = select(&data.corpus, &run.held_out);
            let ev = evaluate_policy(&run.params, &run.encoder, &test, data.mos(), &c)?;
            let m = ev.eval.metrics;
            log::info!("ablation {} seed {}: rmse {:.3} mi {:.4}", v.name(), c.train.seed, ev.eval.rmse, ev.mi_diagnostic);
            runs.push(AblationRun {
                variant: v,
                train_seed: c.train.seed,
                plcc: m.map_or(f64::NAN, |m| m.plcc),
                srcc: m.map_or(f64::NAN, |m| m.srcc),
                rmse: ev.eval.rmse,
                krcc: m.map_or(f64::NAN, |m| m.krcc),
                mean_cot_len: ev.eval.mean_cot_len,
                mean_entropy: ev.eval.mean_entropy,
                mi_diagnostic: ev.mi_diagnostic,
                fallback_fraction: ev.eval.fallback_fraction,
            });
        }
    }
    let rows = variants
        .iter()
        .map(|&v| {
            let rs: Vec<&AblationRun> = runs.iter().filter(|r| r.variant == v).collect();
            let n = rs.len() as f64;
            let mean = |f: fn(&AblationRun) -> f64| rs.iter().map(|r| f(r)).sum::<f64>() / n;
            AblationRow {
                variant: v.name().to_string(),
                n_seeds: rs.len(),
                plcc: mean(|r| r.plcc),
                srcc: mean(|r| r.srcc),
                rmse: mean(|r| r.rmse),
                krcc: mean(|r| r.krcc),
                mean_cot_len: mean(|r| r.mean_cot_len),
                mean_entropy: mean(|r| r.mean_entropy),
                mi_diagnostic: mean(|r| r.mi_diagnostic),
                fallback_fraction: mean(|r| r.fallback_fraction),
            }
        })
        .collect();
    Ok(Ablation { runs, rows })
}

pub fn write_ablation_csv<W: Write>(w: W, rows: &[AblationRow]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in rows {
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_ablation_runs_csv<W: Write>(w: W, runs: &[AblationRun]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in runs {
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_trace<W: Write>(mut w: W, trace: &[TraceRecord]) -> Result<()> {
    for r in trace {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}
