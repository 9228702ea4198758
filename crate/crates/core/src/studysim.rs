//! Simulated crowdsourced study and rater quality control.
//!
//! Honest raters follow `S_ij = clip(psi_j + bias_i + inconsistency_i * z, 0, 100)`
//! with `z ~ N(0,1)`. Misbehaving raters override the score or the timing.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::{Read, Write};

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, LogNormal, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, stream};
use crate::synthcorpus::VideoInstance;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Behavior {
    Honest,
    RandomClicker,
    Speeder,
    ConstantRater,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectModel {
    pub subject_id: String,
    pub bias: f64,
    pub inconsistency: f64,
    pub behavior: Behavior,
}

impl SubjectModel {
    pub fn honest(id: impl Into<String>, bias: f64, inconsistency: f64) -> Self {
        SubjectModel { subject_id: id.into(), bias, inconsistency, behavior: Behavior::Honest }
    }

    fn validate(&self) -> Result<()> {
        if !(self.inconsistency >= 0.0) || !self.bias.is_finite() || !self.inconsistency.is_finite() {
            return Err(Error::InvalidInput(format!(
                "subject {} has invalid parameters (bias {}, inconsistency {})",
                self.subject_id, self.bias, self.inconsistency
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatingRecord {
    pub subject_id: String,
    pub video_id: String,
    pub score: f64,
    pub elapsed_ms: u64,
    pub is_golden: bool,
    pub is_repeat_of: Option<String>,
    pub session_ok: bool,
}

/// Pilot-study reference for one golden video.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GoldenTruth {
    pub pilot_mos: f64,
    pub pilot_sd: f64,
}

/// Per-subject population that `sample_subjects` draws from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PopulationConfig {
    pub n_honest: usize,
    pub bias_sd: f64,
    pub inconsistency_range: (f64, f64),
    pub n_random_clickers: usize,
    pub n_speeders: usize,
    pub n_constant: usize,
}

impl Default for PopulationConfig {
    fn default() -> Self {
        PopulationConfig {
            n_honest: 50,
            bias_sd: 5.0,
            inconsistency_range: (2.0, 6.0),
            n_random_clickers: 0,
            n_speeders: 0,
            n_constant: 0,
        }
    }
}

/// Study layout and behaviour parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StudyDesign {
    pub ratings_per_video: usize,
    /// Videos per session including goldens and repeats.
    pub session_size: usize,
    pub goldens_per_session: usize,
    pub repeats_per_session: usize,
    pub n_golden_videos: usize,
    /// Pilot panel used to establish golden-set MOS and spread.
    pub pilot_panel: usize,
    pub golden_mos_range: (f64, f64),
    /// Honest per-rating dwell time: log-normal median and log-sd.
    pub honest_time_median_ms: f64,
    pub honest_time_log_sd: f64,
    pub speeder_time_median_ms: f64,
    pub constant_score: f64,
    /// Probability that an individual rating happens in a broken playback.
    pub playback_failure_rate: f64,
    pub golden_prefix: String,
}

impl Default for StudyDesign {
    fn default() -> Self {
        StudyDesign {
            ratings_per_video: 35,
            session_size: 94,
            goldens_per_session: 5,
            repeats_per_session: 5,
            n_golden_videos: 10,
            pilot_panel: 24,
            golden_mos_range: (20.0, 85.0),
            honest_time_median_ms: 12_000.0,
            honest_time_log_sd: 0.25,
            speeder_time_median_ms: 2_500.0,
            constant_score: 50.0,
            playback_failure_rate: 0.0,
            golden_prefix: "golden".to_string(),
        }
    }
}

impl StudyDesign {
    fn regular_per_session(&self) -> Result<usize> {
        let control = self.goldens_per_session + self.repeats_per_session;
        if self.session_size <= control {
            return Err(Error::InvalidInput("session too small for its control videos".into()));
        }
        Ok(self.session_size - control)
    }

    /// `[p1, p99]` of the honest dwell-time model.
    pub fn honest_timing_bounds(&self) -> (f64, f64) {
        const Z99: f64 = 2.326_347_874_040_841;
        let mu = self.honest_time_median_ms.ln();
        ((mu - Z99 * self.honest_time_log_sd).exp(), (mu + Z99 * self.honest_time_log_sd).exp())
    }
}

/// A simulated study: the ratings plus the pilot truth for its goldens.
#[derive(Debug, Clone, PartialEq)]
pub struct Study {
    pub records: Vec<RatingRecord>,
    pub golden_truth: BTreeMap<String, GoldenTruth>,
    /// Latent quality of golden stimuli (simulator-side truth).
    pub golden_psi: BTreeMap<String, f64>,
}

pub fn sample_subjects(pop: &PopulationConfig, seed: u64) -> Vec<SubjectModel> {
    let mut r = rng::rng(rng::derive(seed, &[stream::SUBJECTS]));
    let normal = Normal::new(0.0, pop.bias_sd.max(0.0)).expect("finite sd");
    let mut out = Vec::new();
    let mut push = |behavior: Behavior, r: &mut rng::Rng, k: usize| {
        let bias = normal.sample(r);
        let (lo, hi) = pop.inconsistency_range;
        let inconsistency = if hi > lo { r.random_range(lo..hi) } else { lo };
        let tag = match behavior {
            Behavior::Honest => "h",
            Behavior::RandomClicker => "rc",
            Behavior::Speeder => "sp",
            Behavior::ConstantRater => "cr",
        };
        out.push(SubjectModel { subject_id: format!("s{tag}{k:03}"), bias, inconsistency, behavior });
    };
    for k in 0..pop.n_honest {
        push(Behavior::Honest, &mut r, k);
    }
    for k in 0..pop.n_random_clickers {
        push(Behavior::RandomClicker, &mut r, k);
    }
    for k in 0..pop.n_speeders {
        push(Behavior::Speeder, &mut r, k);
    }
    for k in 0..pop.n_constant {
        push(Behavior::ConstantRater, &mut r, k);
    }
    out
}

fn honest_score(psi: f64, s: &SubjectModel, z: f64) -> f64 {
    (psi + s.bias + s.inconsistency * z).clamp(0.0, 100.0)
}

fn emit_score(psi: f64, s: &SubjectModel, design: &StudyDesign, r: &mut rng::Rng) -> f64 {
    let z: f64 = r.sample(rand_distr::StandardNormal);
    match s.behavior {
        Behavior::Honest | Behavior::Speeder => honest_score(psi, s, z),
        Behavior::RandomClicker => r.random_range(0.0..=100.0),
        Behavior::ConstantRater => design.constant_score.clamp(0.0, 100.0),
    }
}

fn emit_time(s: &SubjectModel, design: &StudyDesign, r: &mut rng::Rng) -> u64 {
    let median = match s.behavior {
        Behavior::Speeder => design.speeder_time_median_ms,
        _ => design.honest_time_median_ms,
    };
    let ln = LogNormal::new(median.ln(), design.honest_time_log_sd).expect("valid log-normal");
    (ln.sample(r).round() as u64).max(1)
}

/// Golden stimuli with pilot MOS and spread measured on a simulated honest
/// pilot panel drawn from `pilot_population`.
pub fn make_goldens(
    design: &StudyDesign,
    pilot_population: &PopulationConfig,
    seed: u64,
) -> (BTreeMap<String, GoldenTruth>, BTreeMap<String, f64>) {
    let mut r = rng::rng(rng::derive(seed, &[stream::GOLDEN]));
    let pilot_pop = PopulationConfig {
        n_honest: design.pilot_panel.max(2),
        n_random_clickers: 0,
        n_speeders: 0,
        n_constant: 0,
        ..pilot_population.clone()
    };
    let panel = sample_subjects(&pilot_pop, rng::derive(seed, &[stream::GOLDEN, 1]));
    let mut truth = BTreeMap::new();
    let mut psi_map = BTreeMap::new();
    for g in 0..design.n_golden_videos {
        let id = format!("{}{:03}", design.golden_prefix, g);
        let (lo, hi) = design.golden_mos_range;
        let psi = r.random_range(lo..=hi);
        let scores: Vec<f64> = panel.iter().map(|s| honest_score(psi, s, r.sample(rand_distr::StandardNormal))).collect();
        let n = scores.len() as f64;
        let mean = scores.iter().sum::<f64>() / n;
        let sd = (scores.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        truth.insert(id.clone(), GoldenTruth { pilot_mos: mean, pilot_sd: sd });
        psi_map.insert(id, psi);
    }
    (truth, psi_map)
}

/// Balanced assignment: video slots are dealt round-robin over a shuffled
/// subject order so each video gets `ratings_per_video` distinct raters
/// (capped by the number of subjects).
fn assign_videos(n_videos: usize, n_subjects: usize, per_video: usize, r: &mut rng::Rng) -> Vec<Vec<usize>> {
    let mut per_subject: Vec<Vec<usize>> = vec![Vec::new(); n_subjects];
    let raters = per_video.min(n_subjects);
    let mut cursor = 0usize;
    let mut order: Vec<usize> = (0..n_subjects).collect();
    order.shuffle(r);
    for v in 0..n_videos {
        for k in 0..raters {
            per_subject[order[(cursor + k) % n_subjects]].push(v);
        }
        cursor = (cursor + raters) % n_subjects;
        if cursor < raters {
            order.shuffle(r);
        }
    }
    for list in per_subject.iter_mut() {
        list.sort_unstable();
        list.dedup();
        list.shuffle(r);
    }
    per_subject
}

/// Simulate every subject's sessions. Each subject draws from a stream keyed
/// by `(seed, subject_id)`; the output is ordered by subject, then session.
pub fn simulate_study(
    corpus: &[VideoInstance],
    subjects: &[SubjectModel],
    design: &StudyDesign,
    golden_psi: &BTreeMap<String, f64>,
    seed: u64,
) -> Result<Vec<RatingRecord>> {
    if corpus.is_empty() {
        return Err(Error::InvalidInput("empty corpus".into()));
    }
    if subjects.is_empty() {
        return Err(Error::InvalidInput("no subjects".into()));
    }
    for s in subjects {
        s.validate()?;
    }
    let regular = design.regular_per_session()?;
    if design.goldens_per_session > 0 && golden_psi.is_empty() {
        return Err(Error::InvalidInput("design calls for goldens but none were supplied".into()));
    }
    let mut assign_rng = rng::rng(rng::derive(seed, &[stream::STUDY, 0]));
    let assignment = assign_videos(corpus.len(), subjects.len(), design.ratings_per_video, &mut assign_rng);
    let goldens: Vec<(&String, &f64)> = golden_psi.iter().collect();

    let per_subject: Vec<Vec<RatingRecord>> = subjects
        .par_iter()
        .zip(assignment.par_iter())
        .map(|(s, videos)| {
            let mut r = rng::rng(rng::derive_str(seed, &s.subject_id, &[stream::STUDY]));
            let mut out = Vec::new();
            for chunk in videos.chunks(regular) {
                let mut items: Vec<(usize, Option<usize>)> = Vec::new();
                // regular videos
                for &v in chunk {
                    items.push((v, None));
                }
                // repeats duplicate regular videos of this session
                let mut repeat_pool: Vec<usize> = chunk.to_vec();
                repeat_pool.shuffle(&mut r);
                for &v in repeat_pool.iter().take(design.repeats_per_session) {
                    items.push((v, Some(v)));
                }
                let mut session: Vec<RatingRecord> = Vec::with_capacity(items.len() + design.goldens_per_session);
                items.shuffle(&mut r);
                // originals must precede their repeats in presentation order
                let mut seen = BTreeSet::new();
                let mut deferred = Vec::new();
                for (v, rep) in items {
                    if rep.is_some() && !seen.contains(&v) {
                        deferred.push((v, rep));
                        continue;
                    }
                    seen.insert(v);
                    session.push(rate(&corpus[v], rep.map(|_| corpus[v].id.clone()), s, design, &mut r));
                }
                for (v, rep) in deferred {
                    session.push(rate(&corpus[v], rep.map(|_| corpus[v].id.clone()), s, design, &mut r));
                }
                let mut golden_idx: Vec<usize> = (0..goldens.len()).collect();
                golden_idx.shuffle(&mut r);
                for &g in golden_idx.iter().take(design.goldens_per_session) {
                    let (gid, &psi) = goldens[g];
                    let score = emit_score(psi, s, design, &mut r);
                    let elapsed_ms = emit_time(s, design, &mut r);
                    let session_ok = r.random::<f64>() >= design.playback_failure_rate;
                    session.push(RatingRecord {
                        subject_id: s.subject_id.clone(),
                        video_id: gid.clone(),
                        score,
                        elapsed_ms,
                        is_golden: true,
                        is_repeat_of: None,
                        session_ok,
                    });
                }
                out.extend(session);
            }
            out
        })
        .collect();
    Ok(per_subject.into_iter().flatten().collect())
}

fn rate(v: &VideoInstance, repeat_of: Option<String>, s: &SubjectModel, design: &StudyDesign, r: &mut rng::Rng) -> RatingRecord {
    let score = emit_score(v.true_mos, s, design, r);
    let elapsed_ms = emit_time(s, design, r);
    let session_ok = r.random::<f64>() >= design.playback_failure_rate;
    RatingRecord {
        subject_id: s.subject_id.clone(),
        video_id: v.id.clone(),
        score,
        elapsed_ms,
        is_golden: false,
        is_repeat_of: repeat_of,
        session_ok,
    }
}

/// Convenience wrapper: goldens from the pilot panel, then the study.
pub fn run_study(
    corpus: &[VideoInstance],
    subjects: &[SubjectModel],
    design: &StudyDesign,
    pilot_population: &PopulationConfig,
    seed: u64,
) -> Result<Study> {
    let (golden_truth, golden_psi) = if design.goldens_per_session > 0 {
        make_goldens(design, pilot_population, seed)
    } else {
        (BTreeMap::new(), BTreeMap::new())
    };
    let records = simulate_study(corpus, subjects, design, &golden_psi, seed)?;
    Ok(Study { records, golden_truth, golden_psi })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QcRule {
    GoldenDeviation,
    RepeatInconsistency,
    TimingAnomaly,
    PlaybackFailure,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QcPolicy {
    /// Golden flags when `|score - pilot_mos| > golden_sd_multiple * pilot_sd`.
    pub golden_sd_multiple: f64,
    /// Repeat flags when `|score - original| > repeat_max_diff`.
    pub repeat_max_diff: f64,
    /// Timing flags when the subject's median dwell falls outside these bounds.
    pub timing_bounds_ms: (f64, f64),
    /// Playback check flags when more than this fraction of a subject's
    /// ratings came from broken sessions.
    pub playback_fraction: f64,
    /// Reject when the fraction of flagged checks exceeds this.
    pub threshold: f64,
    /// Reject once this many checks are flagged.
    pub min_failures: usize,
    /// Rules whose single violation rejects the subject outright.
    pub disqualifying: Vec<QcRule>,
}

impl Default for QcPolicy {
    fn default() -> Self {
        let (lo, hi) = StudyDesign::default().honest_timing_bounds();
        QcPolicy {
            golden_sd_multiple: 2.0,
            repeat_max_diff: 20.0,
            timing_bounds_ms: (lo, hi),
            playback_fraction: 0.5,
            threshold: 0.5,
            min_failures: 3,
            disqualifying: vec![QcRule::TimingAnomaly, QcRule::PlaybackFailure],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rejection {
    pub subject_id: String,
    pub reasons: Vec<QcRule>,
    pub flagged_checks: usize,
    pub total_checks: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct QcOutcome {
    pub accepted: Vec<RatingRecord>,
    pub rejections: Vec<Rejection>,
}

#[derive(Debug, Default)]
struct SubjectChecks {
    checks: usize,
    flags: Vec<QcRule>,
}

fn median(xs: &mut [f64]) -> f64 {
    xs.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Partition records into accepted and rejected-subject sets.
///
/// Checks per subject: one per golden rating, one per repeat pair, one timing
/// check on the subject's median dwell, one playback check. A subject is
/// rejected when `flags >= min_failures`, when `flags / checks > threshold`,
/// or when any disqualifying rule is violated.
/// Ratings from broken sessions are dropped even for accepted subjects.
pub fn qc_screen(records: &[RatingRecord], golden_truth: &BTreeMap<String, GoldenTruth>, policy: &QcPolicy) -> Result<QcOutcome> {
    let mut by_subject: BTreeMap<&str, Vec<&RatingRecord>> = BTreeMap::new();
    for r in records {
        by_subject.entry(&r.subject_id).or_default().push(r);
    }
    let mut rejected: BTreeSet<String> = BTreeSet::new();
    let mut rejections = Vec::new();
    for (subject, recs) in &by_subject {
        let mut c = SubjectChecks::default();
        let mut originals: HashMap<&str, f64> = HashMap::new();
        for r in recs.iter().filter(|r| !r.is_golden && r.is_repeat_of.is_none()) {
            originals.entry(r.video_id.as_str()).or_insert(r.score);
        }
        for r in recs {
            if r.is_golden {
                let truth = golden_truth
                    .get(&r.video_id)
                    .ok_or_else(|| Error::InvalidInput(format!("golden video {} missing from golden truth", r.video_id)))?;
                c.checks += 1;
                if (r.score - truth.pilot_mos).abs() > policy.golden_sd_multiple * truth.pilot_sd {
                    c.flags.push(QcRule::GoldenDeviation);
                }
            } else if let Some(orig_id) = &r.is_repeat_of {
                if let Some(&orig) = originals.get(orig_id.as_str()) {
                    c.checks += 1;
                    if (r.score - orig).abs() > policy.repeat_max_diff {
                        c.flags.push(QcRule::RepeatInconsistency);
                    }
                }
            }
        }
        let mut times: Vec<f64> = recs.iter().map(|r| r.elapsed_ms as f64).collect();
        let med = median(&mut times);
        c.checks += 1;
        if med < policy.timing_bounds_ms.0 || med > policy.timing_bounds_ms.1 {
            c.flags.push(QcRule::TimingAnomaly);
        }
        let broken = recs.iter().filter(|r| !r.session_ok).count() as f64;
        c.checks += 1;
        if broken / recs.len() as f64 > policy.playback_fraction {
            c.flags.push(QcRule::PlaybackFailure);
        }
        let n_flags = c.flags.len();
        let disqualified = c.flags.iter().any(|f| policy.disqualifying.contains(f));
        if disqualified || n_flags >= policy.min_failures || n_flags as f64 / c.checks as f64 > policy.threshold {
            let mut reasons = c.flags.clone();
            reasons.sort();
            reasons.dedup();
            rejections.push(Rejection {
                subject_id: subject.to_string(),
                reasons,
                flagged_checks: n_flags,
                total_checks: c.checks,
            });
            rejected.insert(subject.to_string());
        }
    }
    let accepted = records.iter().filter(|r| r.session_ok && !rejected.contains(&r.subject_id)).cloned().collect();
    Ok(QcOutcome { accepted, rejections })
}

pub const RATINGS_HEADER: [&str; 7] =
    ["subject_id", "video_id", "score", "elapsed_ms", "is_golden", "is_repeat_of", "session_ok"];

pub fn write_ratings<W: Write>(w: W, records: &[RatingRecord]) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(RATINGS_HEADER)?;
    for r in records {
        wr.write_record([
            r.subject_id.as_str(),
            r.video_id.as_str(),
            &crate::serial::decimal17(r.score),
            &r.elapsed_ms.to_string(),
            if r.is_golden { "true" } else { "false" },
            r.is_repeat_of.as_deref().unwrap_or(""),
            if r.session_ok { "true" } else { "false" },
        ])?;
    }
    wr.flush()?;
    Ok(())
}

pub fn read_ratings<R: Read>(r: R) -> Result<Vec<RatingRecord>> {
    let mut rd = csv::Reader::from_reader(r);
    let header = rd.headers()?.clone();
    if header.iter().collect::<Vec<_>>() != RATINGS_HEADER {
        return Err(Error::InvalidInput(format!("unexpected ratings header: {:?}", header)));
    }
    let parse_bool = |s: &str, line: usize| match s {
        "true" => Ok(true),
        "false" => Ok(false),
        other => Err(Error::InvalidInput(format!("line {line}: bad boolean {other:?}"))),
    };
    let mut out = Vec::new();
    for (k, row) in rd.records().enumerate() {
        let row = row?;
        let line = k + 2;
        let score: f64 = row[2].parse().map_err(|_| Error::InvalidInput(format!("line {line}: bad score {:?}", &row[2])))?;
        if !(0.0..=100.0).contains(&score) {
            return Err(Error::InvalidInput(format!("line {line}: score {score} outside [0,100]")));
        }
        let elapsed_ms: u64 =
            row[3].parse().map_err(|_| Error::InvalidInput(format!("line {line}: bad elapsed_ms {:?}", &row[3])))?;
        if elapsed_ms == 0 {
            return Err(Error::InvalidInput(format!("line {line}: elapsed_ms must be positive")));
        }
        out.push(RatingRecord {
            subject_id: row[0].to_string(),
            video_id: row[1].to_string(),
            score,
            elapsed_ms,
            is_golden: parse_bool(&row[4], line)?,
            is_repeat_of: if row[5].is_empty() { None } else { Some(row[5].to_string()) },
            session_ok: parse_bool(&row[6], line)?,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthcorpus::{generate_corpus, CorpusConfig};

    fn no_control() -> StudyDesign {
        StudyDesign { goldens_per_session: 0, repeats_per_session: 0, ..StudyDesign::default() }
    }

    #[test]
    fn noise_free_subject_reproduces_truth() {
        let corpus = generate_corpus(&CorpusConfig { n: 30, ..Default::default() }, 2).unwrap();
        let s = vec![SubjectModel::honest("a", 0.0, 0.0)];
        let recs = simulate_study(&corpus, &s, &no_control(), &BTreeMap::new(), 5).unwrap();
        assert_eq!(recs.len(), 30);
        let truth: HashMap<_, _> = corpus.iter().map(|v| (v.id.clone(), v.true_mos)).collect();
        for r in recs {
            assert_eq!(r.score, truth[&r.video_id].clamp(0.0, 100.0));
        }
    }

    #[test]
    fn bias_shifts_score() {
        let mut corpus = generate_corpus(&CorpusConfig { n: 3, ..Default::default() }, 2).unwrap();
        for v in corpus.iter_mut() {
            v.true_mos = 50.0;
        }
        let s = vec![SubjectModel::honest("a", 10.0, 0.0)];
        let recs = simulate_study(&corpus, &s, &no_control(), &BTreeMap::new(), 1).unwrap();
        assert!(recs.iter().all(|r| r.score == 60.0));
    }

    #[test]
    fn empty_inputs_error() {
        let corpus = generate_corpus(&CorpusConfig { n: 3, ..Default::default() }, 2).unwrap();
        let s = vec![SubjectModel::honest("a", 0.0, 1.0)];
        let none = BTreeMap::new();
        assert!(simulate_study(&[], &s, &no_control(), &none, 1).is_err());
        assert!(simulate_study(&corpus, &[], &no_control(), &none, 1).is_err());
    }

    #[test]
    fn rating_counts_near_target() {
        let corpus = generate_corpus(&CorpusConfig { n: 200, ..Default::default() }, 4).unwrap();
        let subjects = sample_subjects(&PopulationConfig::default(), 4);
        let study = run_study(&corpus, &subjects, &StudyDesign::default(), &PopulationConfig::default(), 4).unwrap();
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for r in study.records.iter().filter(|r| !r.is_golden && r.is_repeat_of.is_none()) {
            *counts.entry(r.video_id.as_str()).or_default() += 1;
        }
        assert_eq!(counts.len(), 200);
        for &c in counts.values() {
            assert!((28..=42).contains(&c), "count {c}");
        }
    }

    #[test]
    fn repeat_difference_over_twenty_is_flagged() {
        let mk = |video: &str, score: f64, rep: Option<&str>| RatingRecord {
            subject_id: "x".into(),
            video_id: video.into(),
            score,
            elapsed_ms: 12_000,
            is_golden: false,
            is_repeat_of: rep.map(String::from),
            session_ok: true,
        };
        let recs = vec![mk("v1", 40.0, None), mk("v1", 65.0, Some("v1")), mk("v2", 50.0, None)];
        let policy = QcPolicy { min_failures: 1, ..QcPolicy::default() };
        let out = qc_screen(&recs, &BTreeMap::new(), &policy).unwrap();
        assert_eq!(out.rejections.len(), 1);
        assert_eq!(out.rejections[0].reasons, vec![QcRule::RepeatInconsistency]);
        // exactly 20 apart is within tolerance
        let recs = vec![mk("v1", 40.0, None), mk("v1", 60.0, Some("v1"))];
        assert!(qc_screen(&recs, &BTreeMap::new(), &policy).unwrap().rejections.is_empty());
    }

    #[test]
    fn golden_missing_from_truth_is_an_error() {
        let r = RatingRecord {
            subject_id: "x".into(),
            video_id: "g".into(),
            score: 50.0,
            elapsed_ms: 1,
            is_golden: true,
            is_repeat_of: None,
            session_ok: true,
        };
        assert!(qc_screen(&[r], &BTreeMap::new(), &QcPolicy::default()).is_err());
    }

    #[test]
    fn perfect_honest_subject_has_no_flags() {
        let corpus = generate_corpus(&CorpusConfig { n: 84, ..Default::default() }, 9).unwrap();
        let s = vec![SubjectModel::honest("a", 0.0, 0.0)];
        let design = StudyDesign::default();
        let (truth, mut psi) = make_goldens(&design, &PopulationConfig::default(), 9);
        // rate goldens at pilot MOS exactly
        for (k, v) in psi.iter_mut() {
            *v = truth[k].pilot_mos;
        }
        let recs = simulate_study(&corpus, &s, &design, &psi, 9).unwrap();
        let out = qc_screen(&recs, &truth, &QcPolicy::default()).unwrap();
        assert!(out.rejections.is_empty());
        assert_eq!(out.accepted.len(), recs.len());
    }

    #[test]
    fn qc_never_alters_records() {
        let corpus = generate_corpus(&CorpusConfig { n: 100, ..Default::default() }, 3).unwrap();
        let pop = PopulationConfig { n_honest: 10, n_random_clickers: 3, n_speeders: 2, ..Default::default() };
        let subjects = sample_subjects(&pop, 3);
        let study = run_study(&corpus, &subjects, &StudyDesign::default(), &pop, 3).unwrap();
        let out = qc_screen(&study.records, &study.golden_truth, &QcPolicy::default()).unwrap();
        for a in &out.accepted {
            assert!(study.records.contains(a));
        }
        let speeders: Vec<_> = out.rejections.iter().filter(|r| r.subject_id.starts_with("ssp")).collect();
        assert_eq!(speeders.len(), 2);
        assert!(speeders.iter().all(|r| r.reasons.contains(&QcRule::TimingAnomaly)));
    }

    #[test]
    fn csv_round_trip() {
        let corpus = generate_corpus(&CorpusConfig { n: 20, ..Default::default() }, 3).unwrap();
        let subjects = sample_subjects(&PopulationConfig { n_honest: 3, ..Default::default() }, 3);
        let study = run_study(&corpus, &subjects, &StudyDesign::default(), &PopulationConfig::default(), 3).unwrap();
        let mut buf = Vec::new();
        write_ratings(&mut buf, &study.records).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("subject_id,video_id,score,elapsed_ms,is_golden,is_repeat_of,session_ok\n"));
        assert_eq!(read_ratings(&buf[..]).unwrap(), study.records);
    }
}
