//! Toy dual-domain contrastive encoder.
//!
//! Frames (HDR features or their tone-mapped version) and synthetic captions
//! are mapped linearly into a shared embedding space. Training minimises a
//! pairwise sigmoid alignment loss on HDR frames plus a margin triplet that
//! keeps the HDR embedding closer to its caption than the SDR embedding.

use rand::seq::index;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::{AdamConfig, AdamState};
use crate::rng::{self, stream};
use crate::synthcorpus::VideoInstance;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    pub d_in: usize,
    pub d_cap: usize,
    pub d_emb: usize,
    /// `d_emb x d_in`, row-major.
    pub frame_map: Vec<f64>,
    /// `d_emb x d_cap`, row-major.
    pub caption_map: Vec<f64>,
    pub t: f64,
    pub b: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub d_emb: usize,
    pub d_cap: usize,
    pub caption_noise_sd: f64,
    pub delta: f64,
    pub lambda_ctr: f64,
    pub lr: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub init_sd: f64,
    pub t_init: f64,
    pub b_init: f64,
    /// Use `max(0, delta - D(hdr,cap) + D(sdr,cap))` instead of the
    /// closer-to-caption triplet.
    pub reversed_contrast_sign: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            d_emb: 16,
            d_cap: 8,
            caption_noise_sd: 0.05,
            delta: 0.2,
            lambda_ctr: 0.5,
            lr: 0.01,
            steps: 300,
            batch_size: 32,
            init_sd: 0.3,
            t_init: 10.0,
            b_init: -5.0,
            reversed_contrast_sign: false,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_emb == 0 || self.d_cap == 0 {
            return Err(Error::Config("encoder dimensions must be >= 1".into()));
        }
        if !(self.delta >= 0.0) || !(self.lambda_ctr >= 0.0) {
            return Err(Error::Config("delta and lambda_ctr must be >= 0".into()));
        }
        if !(self.lr > 0.0) || !(self.t_init > 0.0) {
            return Err(Error::Config("lr and t_init must be > 0".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("encoder batch_size must be >= 2".into()));
        }
        Ok(())
    }
}

/// One training triple: HDR frame, its tone-mapped frame, caption.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Triple {
    pub hdr: Vec<f64>,
    pub sdr: Vec<f64>,
    pub caption: Vec<f64>,
}

/// Captions are a noisy linear readout of the content slice both domains share.
pub fn make_triples(
    corpus: &[VideoInstance],
    content: std::ops::Range<usize>,
    cfg: &EncoderConfig,
    seed: u64,
) -> Result<Vec<Triple>> {
    let first = corpus.first().ok_or_else(|| Error::InvalidInput("empty corpus".into()))?;
    if content.end > first.hdr_features.len() || content.is_empty() {
        return Err(Error::InvalidInput("content slice out of range".into()));
    }
    let mut r = rng::rng(rng::derive(seed, &[stream::ENCODER, 0]));
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    let readout: Vec<f64> = (0..cfg.d_cap * content.len()).map(|_| std_normal.sample(&mut r)).collect();
    let noise = Normal::new(0.0, cfg.caption_noise_sd.max(0.0)).expect("finite sd");
    Ok(corpus
        .iter()
        .enumerate()
        .map(|(k, v)| {
            let mut r = rng::rng(rng::derive_str(seed, &v.id, &[stream::ENCODER, 1, k as u64]));
            let x = &v.hdr_features[content.clone()];
            let caption = (0..cfg.d_cap)
                .map(|c| {
                    let row = &readout[c * x.len()..(c + 1) * x.len()];
                    row.iter().zip(x).map(|(a, b)| a * (b - 0.5)).sum::<f64>() + noise.sample(&mut r)
                })
                .collect();
            Triple { hdr: v.hdr_features.clone(), sdr: v.sdr_features.clone(), caption }
        })
        .collect())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape { expected: a.len(), got: b.len() });
    }
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::InvalidInput("cosine of a zero vector".into()));
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// `1 - cos(a, b)`, in `[0, 2]`.
pub fn cosine_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    Ok(1.0 - cosine_similarity(a, b)?)
}

/// Gradients of `cos(a, b)` with respect to `a` and `b`.
fn cosine_grads(a: &[f64], b: &[f64]) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::InvalidInput("cosine of a zero vector".into()));
    }
    let c = dot(a, b) / (na * nb);
    let ga = a.iter().zip(b).map(|(x, y)| y / (na * nb) - c * x / (na * na)).collect();
    let gb = a.iter().zip(b).map(|(x, y)| x / (na * nb) - c * y / (nb * nb)).collect();
    Ok((c, ga, gb))
}

/// `max(0, delta + D(hdr, cap) - D(sdr, cap))`.
pub fn contrast_loss(hdr: &[f64], sdr: &[f64], cap: &[f64], delta: f64) -> Result<f64> {
    if !(delta >= 0.0) {
        return Err(Error::InvalidInput(format!("delta must be >= 0, got {delta}")));
    }
    Ok((delta + cosine_distance(hdr, cap)? - cosine_distance(sdr, cap)?).max(0.0))
}

/// Reversed-sign triplet: `max(0, delta - D(hdr, cap) + D(sdr, cap))`.
pub fn contrast_loss_reversed(hdr: &[f64], sdr: &[f64], cap: &[f64], delta: f64) -> Result<f64> {
    if !(delta >= 0.0) {
        return Err(Error::InvalidInput(format!("delta must be >= 0, got {delta}")));
    }
    Ok((delta - cosine_distance(hdr, cap)? + cosine_distance(sdr, cap)?).max(0.0))
}

fn log_sigmoid(x: f64) -> f64 {
    // stable for both signs
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `-(1/N^2) sum_ij log sigmoid(z_ij (t cos(f_i, c_j) + b))` with `z_ii = 1`
/// and `z_ij = -1` off the diagonal.
pub fn sigmoid_align_loss(frames: &[Vec<f64>], caps: &[Vec<f64>], t: f64, b: f64) -> Result<f64> {
    if frames.len() != caps.len() {
        return Err(Error::Shape { expected: frames.len(), got: caps.len() });
    }
    if frames.is_empty() {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    let n = frames.len();
    let mut s = 0.0;
    for (i, f) in frames.iter().enumerate() {
        for (j, c) in caps.iter().enumerate() {
            let z = if i == j { 1.0 } else { -1.0 };
            s -= log_sigmoid(z * (t * cosine_similarity(f, c)? + b));
        }
    }
    Ok(s / (n * n) as f64)
}

impl EncoderParams {
    pub fn init(d_in: usize, cfg: &EncoderConfig, seed: u64) -> Self {
        let mut r = rng::rng(rng::derive(seed, &[stream::INIT, 7]));
        let normal = Normal::new(0.0, cfg.init_sd).expect("finite sd");
        EncoderParams {
            d_in,
            d_cap: cfg.d_cap,
            d_emb: cfg.d_emb,
            frame_map: (0..cfg.d_emb * d_in).map(|_| normal.sample(&mut r)).collect(),
            caption_map: (0..cfg.d_emb * cfg.d_cap).map(|_| normal.sample(&mut r)).collect(),
            t: cfg.t_init,
            b: cfg.b_init,
        }
    }

    fn map(w: &[f64], x: &[f64], d_emb: usize) -> Vec<f64> {
        let d = x.len();
        (0..d_emb).map(|r| dot(&w[r * d..(r + 1) * d], x)).collect()
    }

    pub fn embed_frame(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.d_in {
            return Err(Error::Shape { expected: self.d_in, got: x.len() });
        }
        Ok(Self::map(&self.frame_map, x, self.d_emb))
    }

    pub fn embed_caption(&self, c: &[f64]) -> Result<Vec<f64>> {
        if c.len() != self.d_cap {
            return Err(Error::Shape { expected: self.d_cap, got: c.len() });
        }
        Ok(Self::map(&self.caption_map, c, self.d_emb))
    }

    /// Flat view `[frame_map, caption_map, ln t, b]` used by the optimiser.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = self.frame_map.clone();
        v.extend(&self.caption_map);
        v.push(self.t.ln());
        v.push(self.b);
        v
    }

    pub fn from_flat(&self, v: &[f64]) -> Self {
        let nf = self.frame_map.len();
        let nc = self.caption_map.len();
        EncoderParams {
            frame_map: v[..nf].to_vec(),
            caption_map: v[nf..nf + nc].to_vec(),
            t: v[nf + nc].exp(),
            b: v[nf + nc + 1],
            ..self.clone()
        }
    }

    pub fn check_finite(&self) -> Result<()> {
        crate::error::ensure_finite(&self.to_flat(), "encoder parameters")
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct EncLoss {
    pub total: f64,
    pub sigmoid: f64,
    pub contrast: f64,
}

/// `L_enc = L_sigmoid + lambda_ctr * mean contrast` on one batch, and its
/// gradient with respect to the flat parameters (`ln t` for the temperature).
pub fn enc_loss_and_grad(p: &EncoderParams, batch: &[&Triple], cfg: &EncoderConfig) -> Result<(EncLoss, Vec<f64>)> {
    let n = batch.len();
    if n < 2 {
        return Err(Error::InvalidInput("encoder batch needs >= 2 triples".into()));
    }
    let de = p.d_emb;
    let hdr: Vec<Vec<f64>> = batch.iter().map(|t| p.embed_frame(&t.hdr)).collect::<Result<_>>()?;
    let sdr: Vec<Vec<f64>> = batch.iter().map(|t| p.embed_frame(&t.sdr)).collect::<Result<_>>()?;
    let cap: Vec<Vec<f64>> = batch.iter().map(|t| p.embed_caption(&t.caption)).collect::<Result<_>>()?;
    let mut g_hdr = vec![vec![0.0; de]; n];
    let mut g_sdr = vec![vec![0.0; de]; n];
    let mut g_cap = vec![vec![0.0; de]; n];
    let (mut g_logt, mut g_b) = (0.0, 0.0);

    let nn = (n * n) as f64;
    let mut sig = 0.0;
    for i in 0..n {
        for j in 0..n {
            let z = if i == j { 1.0 } else { -1.0 };
            let (c, ga, gb) = cosine_grads(&hdr[i], &cap[j])?;
            let s = p.t * c + p.b;
            sig -= log_sigmoid(z * s);
            // d/ds of -log sigmoid(z s) is -z sigmoid(-z s)
            let dl_ds = -z * sigmoid(-z * s) / nn;
            g_logt += dl_ds * c * p.t;
            g_b += dl_ds;
            for k in 0..de {
                g_hdr[i][k] += dl_ds * p.t * ga[k];
                g_cap[j][k] += dl_ds * p.t * gb[k];
            }
        }
    }
    sig /= nn;

    let mut ctr = 0.0;
    if cfg.lambda_ctr > 0.0 {
        let sign = if cfg.reversed_contrast_sign { -1.0 } else { 1.0 };
        for i in 0..n {
            let (ch, gh_a, gh_c) = cosine_grads(&hdr[i], &cap[i])?;
            let (cs, gs_a, gs_c) = cosine_grads(&sdr[i], &cap[i])?;
            // D = 1 - cos, so the margin argument is delta + sign*(cs - ch)
            let arg = cfg.delta + sign * (cs - ch);
            if arg > 0.0 {
                ctr += arg;
                let w = cfg.lambda_ctr / n as f64;
                for k in 0..de {
                    g_hdr[i][k] -= w * sign * gh_a[k];
                    g_sdr[i][k] += w * sign * gs_a[k];
                    g_cap[i][k] += w * sign * (gs_c[k] - gh_c[k]);
                }
            }
        }
        ctr /= n as f64;
    }

    let mut grad = vec![0.0; p.frame_map.len() + p.caption_map.len() + 2];
    let nf = p.frame_map.len();
    for i in 0..n {
        let t = batch[i];
        for r in 0..de {
            let row = &mut grad[r * p.d_in..(r + 1) * p.d_in];
            for c in 0..p.d_in {
                row[c] += g_hdr[i][r] * t.hdr[c] + g_sdr[i][r] * t.sdr[c];
            }
            let crow = &mut grad[nf + r * p.d_cap..nf + (r + 1) * p.d_cap];
            for c in 0..p.d_cap {
                crow[c] += g_cap[i][r] * t.caption[c];
            }
        }
    }
    let nc = p.caption_map.len();
    grad[nf + nc] = g_logt;
    grad[nf + nc + 1] = g_b;
    Ok((EncLoss { total: sig + cfg.lambda_ctr * ctr, sigmoid: sig, contrast: ctr }, grad))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: usize,
    pub total: f64,
    pub sigmoid: f64,
    pub contrast: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderRun {
    pub params: EncoderParams,
    pub curve: Vec<CurvePoint>,
    pub collapsed: bool,
}

pub const CURVE_HEADER: &str = "step,total,sigmoid,contrast";

/// True when every frame embedding lies within cosine distance `1e-3` of
/// the mean embedding.
pub fn embeddings_collapsed(embs: &[Vec<f64>]) -> bool {
    if embs.is_empty() {
        return false;
    }
    let d = embs[0].len();
    let mut mean = vec![0.0; d];
    for e in embs {
        for (m, x) in mean.iter_mut().zip(e) {
            *m += x / embs.len() as f64;
        }
    }
    embs.iter().all(|e| cosine_distance(e, &mean).map_or(true, |dd| dd < 1e-3))
}

pub fn train_encoder(triples: &[Triple], cfg: &EncoderConfig, seed: u64) -> Result<EncoderRun> {
    cfg.validate()?;
    let first = triples.first().ok_or_else(|| Error::InvalidInput("no encoder triples".into()))?;
    if first.caption.len() != cfg.d_cap {
        return Err(Error::Shape { expected: cfg.d_cap, got: first.caption.len() });
    }
    let mut params = EncoderParams::init(first.hdr.len(), cfg, seed);
    let mut flat = params.to_flat();
    let mut opt = AdamState::new(flat.len());
    let adam = AdamConfig { weight_decay: 0.0, ..Default::default() };
    let bs = cfg.batch_size.min(triples.len());
    let mut curve = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut r = rng::rng(rng::derive(seed, &[stream::ENCODER, 2, step as u64]));
        let mut idx = index::sample(&mut r, triples.len(), bs).into_vec();
        idx.sort_unstable();
        let batch: Vec<&Triple> = idx.iter().map(|&i| &triples[i]).collect();
        let (loss, grad) = enc_loss_and_grad(&params, &batch, cfg)?;
        if !loss.total.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Numerical(format!("encoder loss diverged at step {step}: {loss:?}")));
        }
        curve.push(CurvePoint { step, total: loss.total, sigmoid: loss.sigmoid, contrast: loss.contrast });
        let descent: Vec<f64> = grad.iter().map(|g| -g).collect();
        opt.ascend(&mut flat, &descent, cfg.lr, &adam, None)?;
        params = params.from_flat(&flat);
    }
    params.check_finite()?;
    let embs: Vec<Vec<f64>> = triples.iter().map(|t| params.embed_frame(&t.hdr)).collect::<Result<_>>()?;
    let collapsed = embeddings_collapsed(&embs);
    if collapsed {
        log::warn!("frame embeddings collapsed: all within cosine distance 1e-3 of their mean");
    }
    Ok(EncoderRun { params, curve, collapsed })
}

/// Mean `D(hdr, cap)` and mean `D(sdr, cap)` over triples.
pub fn caption_distances(p: &EncoderParams, triples: &[Triple]) -> Result<(f64, f64)> {
    if triples.is_empty() {
        return Err(Error::InvalidInput("no triples".into()));
    }
    let (mut dh, mut ds) = (0.0, 0.0);
    for t in triples {
        let c = p.embed_caption(&t.caption)?;
        dh += cosine_distance(&p.embed_frame(&t.hdr)?, &c)?;
        ds += cosine_distance(&p.embed_frame(&t.sdr)?, &c)?;
    }
    let n = triples.len() as f64;
    Ok((dh / n, ds / n))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthcorpus::{generate_corpus, CorpusConfig};

    #[test]
    fn cosine_examples() {
        assert!(cosine_distance(&[1.0, 2.0], &[1.0, 2.0]).unwrap().abs() < 1e-15);
        assert!((cosine_distance(&[1.0, 2.0], &[-1.0, -2.0]).unwrap() - 2.0).abs() < 1e-15);
        let d = cosine_distance(&[1.0, 0.0], &[1.0, 1.0]).unwrap();
        assert!((d - (1.0 - 1.0 / 2f64.sqrt())).abs() < 1e-12);
        assert!(cosine_distance(&[0.0, 0.0], &[1.0, 1.0]).is_err());
    }

    #[test]
    fn contrast_examples() {
        // D(hdr,cap)=0.1 and D(sdr,cap)=0.5 come from cosines 0.9 and 0.5
        let cap = [1.0, 0.0];
        let at = |c: f64| [c, (1.0 - c * c).sqrt()];
        let l = contrast_loss(&at(0.9), &at(0.5), &cap, 0.2).unwrap();
        assert_eq!(l, 0.0);
        let h = [0.3, 0.7];
        assert!((contrast_loss(&h, &h, &cap, 0.2).unwrap() - 0.2).abs() < 1e-15);
        assert_eq!(contrast_loss(&at(0.9), &at(0.5), &cap, 0.0).unwrap(), 0.0);
        assert!(contrast_loss(&h, &h, &cap, -0.1).is_err());
    }

    #[test]
    fn sigmoid_loss_examples() {
        let f = vec![vec![1.0, 0.0]];
        assert!(sigmoid_align_loss(&f, &f, 100.0, 0.0).unwrap() < 1e-40);
        let fs = vec![vec![1.0, 0.2], vec![0.3, -1.0], vec![0.5, 0.5]];
        let cs = vec![vec![0.1, 1.0], vec![1.0, 1.0], vec![-0.2, 0.4]];
        assert!((sigmoid_align_loss(&fs, &cs, 0.0, 0.0).unwrap() - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn lambda_zero_ignores_sdr() {
        let corpus = generate_corpus(&CorpusConfig { n: 6, ..Default::default() }, 1).unwrap();
        let cfg = EncoderConfig { lambda_ctr: 0.0, ..Default::default() };
        let tr = make_triples(&corpus, 4..6, &cfg, 2).unwrap();
        let p = EncoderParams::init(8, &cfg, 3);
        let b: Vec<&Triple> = tr.iter().collect();
        let (_, g1) = enc_loss_and_grad(&p, &b, &cfg).unwrap();
        let moved: Vec<Triple> = tr.iter().map(|t| Triple { sdr: vec![0.9; 8], ..t.clone() }).collect();
        let b2: Vec<&Triple> = moved.iter().collect();
        let (_, g2) = enc_loss_and_grad(&p, &b2, &cfg).unwrap();
        assert_eq!(g1, g2);
    }

    #[test]
    fn training_separates_domains_and_is_deterministic() {
        let corpus = generate_corpus(&CorpusConfig { n: 240, ..Default::default() }, 4).unwrap();
        let cfg = EncoderConfig::default();
        let tr = make_triples(&corpus, 4..6, &cfg, 5).unwrap();
        let (train, held) = tr.split_at(180);
        let a = train_encoder(train, &cfg, 6).unwrap();
        let b = train_encoder(train, &cfg, 6).unwrap();
        assert_eq!(a.params, b.params);
        let (dh, ds) = caption_distances(&a.params, held).unwrap();
        assert!(dh < ds, "{dh} {ds}");
        assert!(!a.collapsed);
    }

    #[test]
    fn collapse_detector() {
        assert!(embeddings_collapsed(&[vec![1.0, 0.0], vec![2.0, 0.0005]]));
        assert!(!embeddings_collapsed(&[vec![1.0, 0.0], vec![0.0, 1.0]]));
    }
}
