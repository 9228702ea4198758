//! Correlation and error metrics, plus split-half reliability of a study.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, stream};
use crate::studysim::RatingRecord;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub srcc: f64,
    pub plcc: f64,
    pub krcc: f64,
    pub rmse: f64,
    pub n: usize,
}

impl MetricReport {
    pub const CSV_HEADER: &'static str = "srcc,plcc,krcc,rmse,n";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{}",
            crate::serial::decimal17(self.srcc),
            crate::serial::decimal17(self.plcc),
            crate::serial::decimal17(self.krcc),
            crate::serial::decimal17(self.rmse),
            self.n
        )
    }
}

fn check_pair(x: &[f64], y: &[f64], min_len: usize) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::Shape { expected: x.len(), got: y.len() });
    }
    if x.len() < min_len {
        return Err(Error::InvalidInput(format!("need at least {min_len} pairs, got {}", x.len())));
    }
    crate::error::ensure_finite(x, "metric input")?;
    crate::error::ensure_finite(y, "metric input")
}

fn pearson_raw(x: &[f64], y: &[f64]) -> Result<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Undefined("constant input vector"));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// 1-based ranks, ties receive the mean of the ranks they span.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i + 1;
        while j < idx.len() && x[idx[j]] == x[idx[i]] {
            j += 1;
        }
        let r = (i + j + 1) as f64 / 2.0;
        for &k in &idx[i..j] {
            ranks[k] = r;
        }
        i = j;
    }
    ranks
}

pub fn plcc(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y, 3)?;
    pearson_raw(x, y)
}

pub fn srcc(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y, 3)?;
    pearson_raw(&average_ranks(x), &average_ranks(y))
}

pub fn rmse(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y, 2)?;
    let ss: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok((ss / x.len() as f64).sqrt())
}

/// Number of tied pairs within runs of equal values of a sorted sequence.
fn tied_pairs<T: PartialEq>(sorted: &[T]) -> u64 {
    let mut total = 0u64;
    let mut run = 1u64;
    for w in sorted.windows(2) {
        if w[0] == w[1] {
            run += 1;
        } else {
            total += run * (run - 1) / 2;
            run = 1;
        }
    }
    total + run * (run - 1) / 2
}

/// Merge sort that counts inversions.
fn sort_count_swaps(v: &mut [f64], buf: &mut Vec<f64>) -> u64 {
    let n = v.len();
    if n < 2 {
        return 0;
    }
    let mid = n / 2;
    let mut swaps = sort_count_swaps(&mut v[..mid], buf) + sort_count_swaps(&mut v[mid..], buf);
    buf.clear();
    let (mut i, mut j) = (0, mid);
    while i < mid && j < n {
        if v[j] < v[i] {
            swaps += (mid - i) as u64;
            buf.push(v[j]);
            j += 1;
        } else {
            buf.push(v[i]);
            i += 1;
        }
    }
    buf.extend_from_slice(&v[i..mid]);
    buf.extend_from_slice(&v[j..n]);
    v.copy_from_slice(buf);
    swaps
}

/// Kendall tau-b by Knight's `O(n log n)` algorithm.
pub fn krcc(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y, 3)?;
    let n = x.len() as u64;
    let mut pairs: Vec<(f64, f64)> = x.iter().copied().zip(y.iter().copied()).collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    let xs: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let tie_x = tied_pairs(&xs);
    let tie_xy = tied_pairs(&pairs);
    let mut ys: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    let mut buf = Vec::with_capacity(ys.len());
    let swaps = sort_count_swaps(&mut ys, &mut buf);
    let tie_y = tied_pairs(&ys);
    let n0 = n * (n - 1) / 2;
    if tie_x == n0 || tie_y == n0 {
        return Err(Error::Undefined("constant input vector"));
    }
    let num = n0 as f64 - tie_x as f64 - tie_y as f64 + tie_xy as f64 - 2.0 * swaps as f64;
    let den = ((n0 - tie_x) as f64 * (n0 - tie_y) as f64).sqrt();
    Ok((num / den).clamp(-1.0, 1.0))
}

/// Four-parameter logistic `f(x) = b2 + (b1 - b2) / (1 + exp(-(x - b3) / |b4|))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Logistic4 {
    pub b1: f64,
    pub b2: f64,
    pub b3: f64,
    pub b4: f64,
}

impl Logistic4 {
    pub fn eval(&self, x: f64) -> f64 {
        self.b2 + (self.b1 - self.b2) / (1.0 + (-(x - self.b3) / self.b4.abs()).exp())
    }

    fn jacobian_row(&self, x: f64) -> [f64; 4] {
        let s = self.b4.abs();
        let e = (-(x - self.b3) / s).exp();
        let g = 1.0 / (1.0 + e);
        let dg_du = g * (1.0 - g);
        let d = self.b1 - self.b2;
        // u = (x - b3) / s
        let u = (x - self.b3) / s;
        [g, 1.0 - g, -d * dg_du / s, -d * dg_du * u / s * self.b4.signum()]
    }

    /// Levenberg-Marquardt least-squares fit of `y ~ f(x)`.
    pub fn fit(x: &[f64], y: &[f64]) -> Result<Logistic4> {
        check_pair(x, y, 4)?;
        let (ymin, ymax) = y.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        let mx = x.iter().sum::<f64>() / x.len() as f64;
        let sx = (x.iter().map(|v| (v - mx).powi(2)).sum::<f64>() / x.len() as f64).sqrt().max(1e-6);
        let mut p = Logistic4 { b1: ymax, b2: ymin, b3: mx, b4: sx };
        let sse = |p: &Logistic4| x.iter().zip(y).map(|(&a, &b)| (b - p.eval(a)).powi(2)).sum::<f64>();
        let mut cur = sse(&p);
        let mut lambda = 1e-3;
        for _ in 0..200 {
            let mut jtj = nalgebra::Matrix4::<f64>::zeros();
            let mut jtr = nalgebra::Vector4::<f64>::zeros();
            for (&a, &b) in x.iter().zip(y) {
                let j = nalgebra::Vector4::from(p.jacobian_row(a));
                let r = b - p.eval(a);
                jtj += j * j.transpose();
                jtr += j * r;
            }
            let mut improved = false;
            for _ in 0..20 {
                let mut lhs = jtj;
                for k in 0..4 {
                    lhs[(k, k)] += lambda * jtj[(k, k)].max(1e-12);
                }
                let Some(step) = lhs.lu().solve(&jtr) else {
                    lambda *= 10.0;
                    continue;
                };
                let cand = Logistic4 { b1: p.b1 + step[0], b2: p.b2 + step[1], b3: p.b3 + step[2], b4: p.b4 + step[3] };
                let c = sse(&cand);
                if c.is_finite() && c < cur && cand.b4 != 0.0 {
                    let rel = (cur - c) / cur.max(1e-300);
                    p = cand;
                    cur = c;
                    lambda = (lambda / 10.0).max(1e-12);
                    improved = rel > 1e-12;
                    break;
                }
                lambda *= 10.0;
            }
            if !improved {
                break;
            }
        }
        Ok(p)
    }
}

/// PLCC after fitting a 4-parameter logistic from predictions to targets.
pub fn plcc_logistic(pred: &[f64], target: &[f64]) -> Result<f64> {
    let f = Logistic4::fit(pred, target)?;
    let mapped: Vec<f64> = pred.iter().map(|&v| f.eval(v)).collect();
    plcc(&mapped, target)
}

pub fn report(pred: &[f64], target: &[f64], logistic_plcc: bool) -> Result<MetricReport> {
    let plcc_v = if logistic_plcc { plcc_logistic(pred, target)? } else { plcc(pred, target)? };
    Ok(MetricReport {
        srcc: srcc(pred, target)?,
        plcc: plcc_v,
        krcc: krcc(pred, target)?,
        rmse: rmse(pred, target)?,
        n: pred.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reliability {
    pub splits: Vec<(f64, f64)>,
    pub median_srcc: f64,
    pub median_plcc: f64,
}

fn median_of(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Random half-splits of each video's ratings. Golden and repeat ratings are
/// control stimuli and are left out.
pub fn split_half_reliability(records: &[RatingRecord], n_splits: usize, seed: u64) -> Result<Reliability> {
    if n_splits == 0 {
        return Err(Error::InvalidInput("n_splits must be positive".into()));
    }
    let mut by_video: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for r in records.iter().filter(|r| !r.is_golden && r.is_repeat_of.is_none()) {
        by_video.entry(&r.video_id).or_default().push(r.score);
    }
    if by_video.len() < 3 {
        return Err(Error::InvalidInput("need at least 3 videos".into()));
    }
    if let Some((v, _)) = by_video.iter().find(|(_, s)| s.len() < 4) {
        return Err(Error::InvalidInput(format!("video {v} has fewer than 4 ratings")));
    }
    let mut splits = Vec::with_capacity(n_splits);
    for k in 0..n_splits {
        let mut r = rng::rng(rng::derive(seed, &[stream::SPLIT, k as u64]));
        let (mut a, mut b) = (Vec::new(), Vec::new());
        for scores in by_video.values() {
            let mut s = scores.clone();
            s.shuffle(&mut r);
            let half = s.len() / 2;
            a.push(s[..half].iter().sum::<f64>() / half as f64);
            b.push(s[half..].iter().sum::<f64>() / (s.len() - half) as f64);
        }
        // a zero-noise study gives identical halves; constant halves carry no ranking
        let sr = srcc(&a, &b)?;
        let pl = plcc(&a, &b)?;
        splits.push((sr, pl));
    }
    let median_srcc = median_of(splits.iter().map(|s| s.0).collect());
    let median_plcc = median_of(splits.iter().map(|s| s.1).collect());
    Ok(Reliability { splits, median_srcc, median_plcc })
}
