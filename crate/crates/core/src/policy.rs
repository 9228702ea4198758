//! Autoregressive softmax token policy with two conditioning pathways.
//!
//! The next-token logits are `out * [proj * ctx ; tok_emb[prev] ; pos_emb[pos]]`,
//! where `ctx` is the HDR slice followed by the SDR slice of the context. The
//! SDR pathway zeroes the HDR slice before the projection.

use std::fmt;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, stream};
use crate::synthcorpus::VideoInstance;

pub const N_STRUCTURAL: usize = 5;
pub const N_SCORES: usize = 101;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Token {
    ThinkOpen,
    ThinkClose,
    AnswerOpen,
    AnswerClose,
    End,
    Reasoning(u8),
    Score(u8),
}

impl fmt::Display for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Token::ThinkOpen => write!(f, "<think>"),
            Token::ThinkClose => write!(f, "</think>"),
            Token::AnswerOpen => write!(f, "<answer>"),
            Token::AnswerClose => write!(f, "</answer>"),
            Token::End => write!(f, "<end>"),
            Token::Reasoning(k) => write!(f, "R{k}"),
            Token::Score(s) => write!(f, "S{s}"),
        }
    }
}

/// Dense token ids: structural `0..5`, reasoning `5..5+m`, scores after.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub n_reasoning: usize,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Vocabulary { n_reasoning: 8 }
    }
}

impl Vocabulary {
    pub const THINK_OPEN: usize = 0;
    pub const THINK_CLOSE: usize = 1;
    pub const ANSWER_OPEN: usize = 2;
    pub const ANSWER_CLOSE: usize = 3;
    pub const END: usize = 4;

    pub fn size(&self) -> usize {
        N_STRUCTURAL + self.n_reasoning + N_SCORES
    }

    pub fn reasoning_id(&self, k: usize) -> usize {
        debug_assert!(k < self.n_reasoning);
        N_STRUCTURAL + k
    }

    pub fn score_id(&self, s: u8) -> usize {
        debug_assert!(s <= 100);
        N_STRUCTURAL + self.n_reasoning + s as usize
    }

    pub fn token(&self, id: usize) -> Option<Token> {
        let first_score = N_STRUCTURAL + self.n_reasoning;
        Some(match id {
            Self::THINK_OPEN => Token::ThinkOpen,
            Self::THINK_CLOSE => Token::ThinkClose,
            Self::ANSWER_OPEN => Token::AnswerOpen,
            Self::ANSWER_CLOSE => Token::AnswerClose,
            Self::END => Token::End,
            k if k < first_score => Token::Reasoning((k - N_STRUCTURAL) as u8),
            k if k < first_score + N_SCORES => Token::Score((k - first_score) as u8),
            _ => return None,
        })
    }

    pub fn id(&self, t: Token) -> usize {
        match t {
            Token::ThinkOpen => Self::THINK_OPEN,
            Token::ThinkClose => Self::THINK_CLOSE,
            Token::AnswerOpen => Self::ANSWER_OPEN,
            Token::AnswerClose => Self::ANSWER_CLOSE,
            Token::End => Self::END,
            Token::Reasoning(k) => self.reasoning_id(k as usize),
            Token::Score(s) => self.score_id(s),
        }
    }

    /// Token names in id order.
    pub fn manifest(&self) -> Vec<String> {
        (0..self.size()).map(|k| self.token(k).expect("dense ids").to_string()).collect()
    }

    /// The score iff `tokens` is exactly
    /// `<think> R* </think> <answer> S </answer> [<end>]`.
    pub fn extract_score(&self, tokens: &[usize]) -> Option<u8> {
        let toks: Vec<Token> = tokens.iter().map(|&t| self.token(t)).collect::<Option<_>>()?;
        let mut it = toks.iter().peekable();
        if it.next() != Some(&Token::ThinkOpen) {
            return None;
        }
        while let Some(Token::Reasoning(_)) = it.peek() {
            it.next();
        }
        if it.next() != Some(&Token::ThinkClose) || it.next() != Some(&Token::AnswerOpen) {
            return None;
        }
        let score = match it.next() {
            Some(Token::Score(s)) => *s,
            _ => return None,
        };
        if it.next() != Some(&Token::AnswerClose) {
            return None;
        }
        match it.next() {
            None | Some(Token::End) => {}
            _ => return None,
        }
        if it.next().is_some() {
            return None;
        }
        Some(score)
    }

    /// Number of reasoning tokens inside the think span.
    pub fn cot_length(&self, tokens: &[usize]) -> usize {
        tokens
            .iter()
            .skip_while(|&&t| t != Self::THINK_OPEN)
            .skip(1)
            .take_while(|&&t| t != Self::THINK_CLOSE)
            .filter(|&&t| matches!(self.token(t), Some(Token::Reasoning(_))))
            .count()
    }
}

pub fn extract_score(tokens: &[usize]) -> Option<u8> {
    Vocabulary::default().extract_score(tokens)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pathway {
    Hdr,
    Sdr,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyShape {
    pub d_hdr: usize,
    pub d_sdr: usize,
    pub d_emb: usize,
    pub t_max: usize,
    pub vocab: Vocabulary,
}

impl Default for PolicyShape {
    fn default() -> Self {
        PolicyShape { d_hdr: 8, d_sdr: 8, d_emb: 16, t_max: 12, vocab: Vocabulary::default() }
    }
}

impl PolicyShape {
    pub fn d_ctx(&self) -> usize {
        self.d_hdr + self.d_sdr
    }
    pub fn v(&self) -> usize {
        self.vocab.size()
    }
    pub fn d_hidden(&self) -> usize {
        3 * self.d_emb
    }
    pub fn proj_len(&self) -> usize {
        self.d_emb * self.d_ctx()
    }
    pub fn tok_len(&self) -> usize {
        self.v() * self.d_emb
    }
    pub fn pos_len(&self) -> usize {
        self.t_max * self.d_emb
    }
    pub fn out_len(&self) -> usize {
        self.v() * self.d_hidden()
    }
    pub fn n_params(&self) -> usize {
        self.proj_len() + self.tok_len() + self.pos_len() + self.out_len()
    }
    pub fn proj_range(&self) -> std::ops::Range<usize> {
        0..self.proj_len()
    }
    pub fn tok_range(&self) -> std::ops::Range<usize> {
        let s = self.proj_len();
        s..s + self.tok_len()
    }
    pub fn pos_range(&self) -> std::ops::Range<usize> {
        let s = self.tok_range().end;
        s..s + self.pos_len()
    }
    pub fn out_range(&self) -> std::ops::Range<usize> {
        let s = self.pos_range().end;
        s..s + self.out_len()
    }
}

/// Parameter blocks of the policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Block {
    Proj,
    TokEmb,
    PosEmb,
    Out,
}

/// Flat parameter vector: `proj` (`d_emb x d_ctx`), `tok_emb` (`V x d_emb`),
/// `pos_emb` (`t_max x d_emb`), `out` (`V x 3 d_emb`), all row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    pub shape: PolicyShape,
    pub data: Vec<f64>,
}

/// Hand-set "pretrained" behaviour for the scoring grammar.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FormatPrior {
    /// Logit margin of grammatical continuations.
    pub margin: f64,
    /// Probability of closing the think span at each reasoning step.
    pub close_prob: f64,
    /// Curvature of the score prior: logit `-curvature * (u - u0)^2` with
    /// `u = (s - 50) / 50` and `u0 = (center - 50) / 50`.
    pub curvature: f64,
    /// Prior mode of the score distribution at a zero projection.
    pub center: f64,
    /// Scale of the random projection initialisation.
    pub proj_init_sd: f64,
    /// Scale of the random noise added to every other block.
    pub noise_sd: f64,
}

impl Default for FormatPrior {
    fn default() -> Self {
        FormatPrior { margin: 10.0, close_prob: 0.35, curvature: 5.5, center: 50.0, proj_init_sd: 0.01, noise_sd: 0.0 }
    }
}

impl PolicyParams {
    pub fn zeros(shape: PolicyShape) -> Self {
        PolicyParams { shape, data: vec![0.0; shape.n_params()] }
    }

    pub fn block(&self, b: Block) -> &[f64] {
        &self.data[self.range(b)]
    }

    pub fn block_mut(&mut self, b: Block) -> &mut [f64] {
        let r = self.range(b);
        &mut self.data[r]
    }

    pub fn range(&self, b: Block) -> std::ops::Range<usize> {
        match b {
            Block::Proj => self.shape.proj_range(),
            Block::TokEmb => self.shape.tok_range(),
            Block::PosEmb => self.shape.pos_range(),
            Block::Out => self.shape.out_range(),
        }
    }

    pub fn random(shape: PolicyShape, sd: f64, seed: u64) -> Self {
        let mut r = rng::rng(rng::derive(seed, &[stream::INIT, 1]));
        let normal = Normal::new(0.0, sd).expect("finite sd");
        PolicyParams { shape, data: (0..shape.n_params()).map(|_| normal.sample(&mut r)).collect() }
    }

    /// Initialisation that already follows the answer grammar and places a
    /// broad prior over scores centred at `center`. The score logits read the
    /// first projected coordinate `z` with slope `2 * curvature * u`, so the
    /// mode of the score distribution sits at `center + 50 z`. The projection itself is
    /// random and small.
    pub fn format_prior(shape: PolicyShape, prior: &FormatPrior, seed: u64) -> Result<Self> {
        let de = shape.d_emb;
        if de < 7 || shape.t_max > de {
            return Err(Error::InvalidInput(format!(
                "format prior needs d_emb >= max(7, t_max); got d_emb {} t_max {}",
                de, shape.t_max
            )));
        }
        if !(0.0..=100.0).contains(&prior.center) {
            return Err(Error::Config(format!("score prior center must lie in [0,100], got {}", prior.center)));
        }
        if !(0.0 < prior.close_prob && prior.close_prob < 1.0) {
            return Err(Error::Config("close_prob must lie in (0,1)".into()));
        }
        let voc = shape.vocab;
        let dh = shape.d_hidden();
        let mut p = PolicyParams::zeros(shape);
        let mut r = rng::rng(rng::derive(seed, &[stream::INIT]));
        let proj_normal = Normal::new(0.0, prior.proj_init_sd.max(0.0)).expect("finite sd");
        for w in p.block_mut(Block::Proj) {
            *w = proj_normal.sample(&mut r);
        }

        // previous-token classes as one-hot embeddings
        const C_THINK_OPEN: usize = 0;
        const C_THINK_CLOSE: usize = 1;
        const C_ANSWER_OPEN: usize = 2;
        const C_ANSWER_CLOSE: usize = 3;
        const C_END: usize = 4;
        const C_REASON: usize = 5;
        const C_SCORE: usize = 6;
        let class_of = |id: usize| match voc.token(id).expect("dense") {
            Token::ThinkOpen => C_THINK_OPEN,
            Token::ThinkClose => C_THINK_CLOSE,
            Token::AnswerOpen => C_ANSWER_OPEN,
            Token::AnswerClose => C_ANSWER_CLOSE,
            Token::End => C_END,
            Token::Reasoning(_) => C_REASON,
            Token::Score(_) => C_SCORE,
        };
        {
            let tok = p.block_mut(Block::TokEmb);
            for id in 0..voc.size() {
                tok[id * de + class_of(id)] = 1.0;
            }
        }
        {
            let pos = p.block_mut(Block::PosEmb);
            for t in 0..shape.t_max {
                pos[t * de + t] = 1.0;
            }
        }
        let m = prior.margin;
        let n_r = voc.n_reasoning as f64;
        let close_logit = m + (n_r * prior.close_prob / (1.0 - prior.close_prob)).ln();
        let out_start = shape.out_range().start;
        let set = |data: &mut Vec<f64>, token: usize, col: usize, val: f64| {
            data[out_start + token * dh + col] = val;
        };
        let prev_col = |c: usize| de + c;
        let pos_col = |t: usize| 2 * de + t;

        set(&mut p.data, Vocabulary::THINK_OPEN, pos_col(0), m);
        for k in 0..voc.n_reasoning {
            let id = voc.reasoning_id(k);
            set(&mut p.data, id, prev_col(C_THINK_OPEN), m);
            set(&mut p.data, id, prev_col(C_REASON), m);
        }
        set(&mut p.data, Vocabulary::THINK_CLOSE, prev_col(C_THINK_OPEN), close_logit);
        set(&mut p.data, Vocabulary::THINK_CLOSE, prev_col(C_REASON), close_logit);
        // the think span has to close early enough to fit the answer, so
        // reasoning tokens are suppressed at late positions
        let last_close = shape.t_max.saturating_sub(4);
        for t in 1..shape.t_max {
            let push = match last_close.checked_sub(t) {
                None | Some(0) => 3.0 * m,
                Some(1) => m,
                Some(2) => 0.5 * m,
                _ => 0.0,
            };
            if push > 0.0 {
                for k in 0..voc.n_reasoning {
                    set(&mut p.data, voc.reasoning_id(k), pos_col(t), -push);
                }
            }
        }
        set(&mut p.data, Vocabulary::ANSWER_OPEN, prev_col(C_THINK_CLOSE), m);
        let u0 = (prior.center - 50.0) / 50.0;
        for s in 0..=100u8 {
            let id = voc.score_id(s);
            let u = (s as f64 - 50.0) / 50.0;
            set(&mut p.data, id, prev_col(C_ANSWER_OPEN), m - prior.curvature * (u - u0) * (u - u0));
            set(&mut p.data, id, 0, 2.0 * prior.curvature * u);
        }
        set(&mut p.data, Vocabulary::ANSWER_CLOSE, prev_col(C_SCORE), m);
        set(&mut p.data, Vocabulary::END, prev_col(C_ANSWER_CLOSE), m);
        let _ = C_END;

        if prior.noise_sd > 0.0 {
            let normal = Normal::new(0.0, prior.noise_sd).expect("finite sd");
            let range = shape.tok_range().start..shape.n_params();
            for w in &mut p.data[range] {
                *w += normal.sample(&mut r);
            }
        }
        Ok(p)
    }

    pub fn check_finite(&self) -> Result<()> {
        crate::error::ensure_finite(&self.data, "policy parameters")
    }

    /// `proj * ctx`, with the HDR slice zeroed on the SDR pathway.
    pub fn project(&self, ctx: &[f64], pathway: Pathway) -> Result<Vec<f64>> {
        let s = &self.shape;
        if ctx.len() != s.d_ctx() {
            return Err(Error::Shape { expected: s.d_ctx(), got: ctx.len() });
        }
        let proj = self.block(Block::Proj);
        let start = match pathway {
            Pathway::Hdr => 0,
            Pathway::Sdr => s.d_hdr,
        };
        let d = s.d_ctx();
        Ok((0..s.d_emb)
            .map(|r| {
                let row = &proj[r * d..(r + 1) * d];
                (start..d).map(|c| row[c] * ctx[c]).sum()
            })
            .collect())
    }

    fn hidden_into(&self, projected: &[f64], prev: Option<usize>, position: usize, h: &mut [f64]) {
        let de = self.shape.d_emb;
        h[..de].copy_from_slice(projected);
        match prev {
            Some(p) => h[de..2 * de].copy_from_slice(&self.block(Block::TokEmb)[p * de..(p + 1) * de]),
            None => h[de..2 * de].iter_mut().for_each(|x| *x = 0.0),
        }
        h[2 * de..].copy_from_slice(&self.block(Block::PosEmb)[position * de..(position + 1) * de]);
    }

    fn logits_from_hidden(&self, h: &[f64], out: &mut [f64]) {
        let dh = self.shape.d_hidden();
        let w = self.block(Block::Out);
        for (v, o) in out.iter_mut().enumerate() {
            let row = &w[v * dh..(v + 1) * dh];
            *o = row.iter().zip(h).map(|(a, b)| a * b).sum();
        }
    }

    /// Next-token logits. `prev` is `None` at the first position.
    pub fn logits(&self, ctx: &[f64], prev: Option<usize>, position: usize, pathway: Pathway) -> Result<Vec<f64>> {
        if position >= self.shape.t_max {
            return Err(Error::InvalidInput(format!("position {position} >= t_max {}", self.shape.t_max)));
        }
        if let Some(p) = prev {
            if p >= self.shape.v() {
                return Err(Error::InvalidInput(format!("token id {p} out of vocabulary")));
            }
        }
        let projected = self.project(ctx, pathway)?;
        let mut h = vec![0.0; self.shape.d_hidden()];
        self.hidden_into(&projected, prev, position, &mut h);
        let mut out = vec![0.0; self.shape.v()];
        self.logits_from_hidden(&h, &mut out);
        Ok(out)
    }

    /// Per-step forward pass over a fixed token sequence.
    pub fn forward(&self, ctx: &[f64], pathway: Pathway, tokens: &[usize]) -> Result<SequenceForward> {
        if tokens.len() > self.shape.t_max {
            return Err(Error::InvalidInput(format!("sequence longer than t_max {}", self.shape.t_max)));
        }
        let projected = self.project(ctx, pathway)?;
        let mut steps = Vec::with_capacity(tokens.len());
        for t in 0..tokens.len() {
            let prev = if t == 0 { None } else { Some(tokens[t - 1]) };
            let mut hidden = vec![0.0; self.shape.d_hidden()];
            self.hidden_into(&projected, prev, t, &mut hidden);
            let mut logp = vec![0.0; self.shape.v()];
            self.logits_from_hidden(&hidden, &mut logp);
            log_softmax_in_place(&mut logp);
            steps.push(StepForward { hidden, logp });
        }
        Ok(SequenceForward { pathway, steps })
    }

    /// Accumulate `d objective / d params` given per-step gradients with
    /// respect to the logits of a previously computed forward pass.
    pub fn backward(&self, ctx: &[f64], tokens: &[usize], fwd: &SequenceForward, dlogits: &[Vec<f64>], grad: &mut [f64]) {
        let s = &self.shape;
        let (de, dh, d) = (s.d_emb, s.d_hidden(), s.d_ctx());
        let start = match fwd.pathway {
            Pathway::Hdr => 0,
            Pathway::Sdr => s.d_hdr,
        };
        let out = self.block(Block::Out);
        let (proj_r, tok_r, pos_r, out_r) = (s.proj_range(), s.tok_range(), s.pos_range(), s.out_range());
        let mut dproj_out = vec![0.0; de];
        let mut dh_buf = vec![0.0; dh];
        for (t, (step, g)) in fwd.steps.iter().zip(dlogits).enumerate() {
            dh_buf.iter_mut().for_each(|x| *x = 0.0);
            for (v, &gv) in g.iter().enumerate() {
                if gv == 0.0 {
                    continue;
                }
                let row = &out[v * dh..(v + 1) * dh];
                let grow = &mut grad[out_r.start + v * dh..out_r.start + (v + 1) * dh];
                for k in 0..dh {
                    grow[k] += gv * step.hidden[k];
                    dh_buf[k] += gv * row[k];
                }
            }
            for k in 0..de {
                dproj_out[k] += dh_buf[k];
            }
            if t > 0 {
                let p = tokens[t - 1];
                let trow = &mut grad[tok_r.start + p * de..tok_r.start + (p + 1) * de];
                for k in 0..de {
                    trow[k] += dh_buf[de + k];
                }
            }
            let prow = &mut grad[pos_r.start + t * de..pos_r.start + (t + 1) * de];
            for k in 0..de {
                prow[k] += dh_buf[2 * de + k];
            }
        }
        for r in 0..de {
            let grow = &mut grad[proj_r.start + r * d..proj_r.start + (r + 1) * d];
            for c in start..d {
                grow[c] += dproj_out[r] * ctx[c];
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct StepForward {
    pub hidden: Vec<f64>,
    /// Log-softmax over the vocabulary.
    pub logp: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct SequenceForward {
    pub pathway: Pathway,
    pub steps: Vec<StepForward>,
}

impl SequenceForward {
    pub fn token_logprobs(&self, tokens: &[usize]) -> Vec<f64> {
        self.steps.iter().zip(tokens).map(|(s, &t)| s.logp[t]).collect()
    }

    pub fn entropies(&self) -> Vec<f64> {
        self.steps.iter().map(|s| entropy_from_logp(&s.logp)).collect()
    }
}

pub fn log_softmax_in_place(x: &mut [f64]) {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + x.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    x.iter_mut().for_each(|v| *v -= lse);
}

pub fn softmax(x: &[f64]) -> Vec<f64> {
    let mut l = x.to_vec();
    log_softmax_in_place(&mut l);
    l.iter().map(|v| v.exp()).collect()
}

/// Shannon entropy (nats) of a distribution given by its log-probabilities.
pub fn entropy_from_logp(logp: &[f64]) -> f64 {
    logp.iter()
        .map(|&l| {
            let p = l.exp();
            if p > 0.0 {
                -p * l
            } else {
                0.0
            }
        })
        .sum::<f64>()
        .max(0.0)
}

/// What the policy is conditioned on: the HDR slice then the SDR slice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyContext {
    pub id: String,
    pub features: Vec<f64>,
}

/// Affine feature normalisation applied before the policy sees a clip.
/// Constant dimensions map to zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextEncoder {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    /// Replace the HDR slice by its tone-mapped version (an HDR-blind encoder).
    #[serde(default)]
    pub hdr_blind: bool,
}

impl ContextEncoder {
    pub fn identity(d_ctx: usize) -> Self {
        ContextEncoder { mean: vec![0.0; d_ctx], scale: vec![1.0; d_ctx], hdr_blind: false }
    }

    fn raw(v: &VideoInstance, hdr_blind: bool) -> Vec<f64> {
        let hdr = if hdr_blind { &v.sdr_features } else { &v.hdr_features };
        hdr.iter().chain(v.sdr_features.iter()).copied().collect()
    }

    /// Fit centring (and optionally unit scaling) on a corpus.
    pub fn fit(corpus: &[VideoInstance], standardize: bool, hdr_blind: bool) -> Result<Self> {
        Self::fit_refs(&corpus.iter().collect::<Vec<_>>(), standardize, hdr_blind)
    }

    pub fn fit_refs(corpus: &[&VideoInstance], standardize: bool, hdr_blind: bool) -> Result<Self> {
        let first = corpus.first().ok_or_else(|| Error::InvalidInput("empty corpus".into()))?;
        let d = first.hdr_features.len() + first.sdr_features.len();
        let n = corpus.len() as f64;
        let mut mean = vec![0.0; d];
        for v in corpus {
            let x = Self::raw(v, hdr_blind);
            if x.len() != d {
                return Err(Error::Shape { expected: d, got: x.len() });
            }
            for (m, xi) in mean.iter_mut().zip(&x) {
                *m += xi / n;
            }
        }
        let mut var = vec![0.0; d];
        for v in corpus {
            for (k, xi) in Self::raw(v, hdr_blind).iter().enumerate() {
                var[k] += (xi - mean[k]).powi(2) / n;
            }
        }
        let scale = var
            .iter()
            .map(|&s| {
                if s < 1e-18 {
                    0.0
                } else if standardize {
                    1.0 / s.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        Ok(ContextEncoder { mean, scale, hdr_blind })
    }

    pub fn encode(&self, v: &VideoInstance) -> PolicyContext {
        let x = Self::raw(v, self.hdr_blind);
        let features = x.iter().enumerate().map(|(k, xi)| (xi - self.mean[k]) * self.scale[k]).collect();
        PolicyContext { id: v.id.clone(), features }
    }
}

/// One sampled completion with its bookkeeping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Completion {
    pub tokens: Vec<usize>,
    /// Per-token log-probabilities under the sampling (old) policy, HDR pathway.
    pub old_logprobs: Vec<f64>,
    /// Per-token log-probabilities of the sampling parameters on each pathway.
    pub pathway_logprobs_hdr: Vec<f64>,
    pub pathway_logprobs_sdr: Vec<f64>,
    pub extracted_score: Option<u8>,
    /// Shannon entropy of the full next-token distribution at each step.
    pub per_token_entropy: Vec<f64>,
}

impl Completion {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }
    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

fn sample_categorical(logp: &[f64], r: &mut rng::Rng) -> usize {
    let u: f64 = r.random();
    let mut acc = 0.0;
    for (k, &l) in logp.iter().enumerate() {
        acc += l.exp();
        if u < acc {
            return k;
        }
    }
    // rounding left a sliver of mass unassigned; take the last supported token
    logp.iter().rposition(|&l| l > f64::NEG_INFINITY).unwrap_or(0)
}

/// Decode one completion. `rng = None` decodes greedily.
pub fn decode(params: &PolicyParams, ctx: &PolicyContext, mut r: Option<&mut rng::Rng>) -> Result<Completion> {
    let s = &params.shape;
    let hdr_proj = params.project(&ctx.features, Pathway::Hdr)?;
    let sdr_proj = params.project(&ctx.features, Pathway::Sdr)?;
    let mut tokens = Vec::with_capacity(s.t_max);
    let mut old_logprobs = Vec::with_capacity(s.t_max);
    let mut sdr_logprobs = Vec::with_capacity(s.t_max);
    let mut entropy = Vec::with_capacity(s.t_max);
    let mut h = vec![0.0; s.d_hidden()];
    let mut logp = vec![0.0; s.v()];
    let mut logp_sdr = vec![0.0; s.v()];
    for t in 0..s.t_max {
        let prev = tokens.last().copied();
        params.hidden_into(&hdr_proj, prev, t, &mut h);
        params.logits_from_hidden(&h, &mut logp);
        log_softmax_in_place(&mut logp);
        let tok = match r.as_deref_mut() {
            Some(r) => sample_categorical(&logp, r),
            None => argmax(&logp),
        };
        params.hidden_into(&sdr_proj, prev, t, &mut h);
        params.logits_from_hidden(&h, &mut logp_sdr);
        log_softmax_in_place(&mut logp_sdr);
        tokens.push(tok);
        old_logprobs.push(logp[tok]);
        sdr_logprobs.push(logp_sdr[tok]);
        entropy.push(entropy_from_logp(&logp));
        if tok == Vocabulary::END {
            break;
        }
    }
    let extracted_score = s.vocab.extract_score(&tokens);
    Ok(Completion {
        tokens,
        pathway_logprobs_hdr: old_logprobs.clone(),
        old_logprobs,
        pathway_logprobs_sdr: sdr_logprobs,
        extracted_score,
        per_token_entropy: entropy,
    })
}

fn argmax(x: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in x.iter().enumerate() {
        if v > x[best] {
            best = k;
        }
    }
    best
}

/// Seed of group member `member` for context `ctx_id`.
pub fn member_seed(seed: u64, ctx_id: &str, member: usize) -> u64 {
    rng::derive_str(seed, ctx_id, &[stream::SAMPLING, member as u64])
}

/// Ancestral sampling of `k` completions on the HDR pathway of
/// `params_old`. Member `i` uses its own stream keyed by
/// `(seed, ctx.id, i)`.
pub fn sample_group(params_old: &PolicyParams, ctx: &PolicyContext, k: usize, seed: u64) -> Result<Vec<Completion>> {
    if k < 2 {
        return Err(Error::InvalidInput(format!("group size must be >= 2, got {k}")));
    }
    (0..k)
        .into_par_iter()
        .map(|i| {
            let mut r = rng::rng(member_seed(seed, &ctx.id, i));
            decode(params_old, ctx, Some(&mut r))
        })
        .collect()
}

pub fn greedy(params: &PolicyParams, ctx: &PolicyContext) -> Result<Completion> {
    decode(params, ctx, None)
}

/// Serialized checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub vocab: Vec<String>,
    pub shape: PolicyShape,
    pub proj: Vec<f64>,
    pub tok_emb: Vec<f64>,
    pub pos_emb: Vec<f64>,
    pub out: Vec<f64>,
    pub encoder: ContextEncoder,
    /// Video ids held out from training, evaluated by default.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub held_out: Vec<String>,
}

pub const CHECKPOINT_FORMAT: &str = "hapo-policy-v1";

impl Checkpoint {
    pub fn new(params: &PolicyParams, encoder: &ContextEncoder) -> Self {
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            vocab: params.shape.vocab.manifest(),
            shape: params.shape,
            proj: params.block(Block::Proj).to_vec(),
            tok_emb: params.block(Block::TokEmb).to_vec(),
            pos_emb: params.block(Block::PosEmb).to_vec(),
            out: params.block(Block::Out).to_vec(),
            encoder: encoder.clone(),
            held_out: Vec::new(),
        }
    }

    pub fn into_parts(self) -> Result<(PolicyParams, ContextEncoder)> {
        if self.format != CHECKPOINT_FORMAT {
            return Err(Error::InvalidInput(format!("unknown checkpoint format {:?}", self.format)));
        }
        if self.vocab != self.shape.vocab.manifest() {
            return Err(Error::InvalidInput("checkpoint vocabulary manifest does not match its shape".into()));
        }
        let s = self.shape;
        for (name, got, want) in [
            ("proj", self.proj.len(), s.proj_len()),
            ("tok_emb", self.tok_emb.len(), s.tok_len()),
            ("pos_emb", self.pos_emb.len(), s.pos_len()),
            ("out", self.out.len(), s.out_len()),
        ] {
            if got != want {
                return Err(Error::InvalidInput(format!("checkpoint block {name}: {got} values, expected {want}")));
            }
        }
        if self.encoder.mean.len() != s.d_ctx() || self.encoder.scale.len() != s.d_ctx() {
            return Err(Error::Shape { expected: s.d_ctx(), got: self.encoder.mean.len() });
        }
        let mut data = self.proj;
        data.extend(self.tok_emb);
        data.extend(self.pos_emb);
        data.extend(self.out);
        let p = PolicyParams { shape: s, data };
        p.check_finite()?;
        Ok((p, self.encoder))
    }
}
