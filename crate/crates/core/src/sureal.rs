//! Maximum-likelihood MOS recovery under `S_ij = psi_j + bias_i + nu_i * X`.
//!
//! Coordinate ascent on the Gaussian log-likelihood. The model is invariant
//! to `(psi + c, bias - c)`; the bias vector is kept at zero sum, shifting
//! `psi` by the same amount so the likelihood never moves on recentering.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::serial::decimal17;
use crate::studysim::RatingRecord;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SurealConfig {
    pub tol: f64,
    pub max_iters: usize,
    pub nu_floor: f64,
}

impl Default for SurealConfig {
    fn default() -> Self {
        SurealConfig { tol: 1e-6, max_iters: 500, nu_floor: 0.1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurealEstimate {
    pub psi: BTreeMap<String, f64>,
    pub bias: BTreeMap<String, f64>,
    pub inconsistency: BTreeMap<String, f64>,
    pub ci95: BTreeMap<String, (f64, f64)>,
    pub loglik: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Log-likelihood after every iteration (index 0 is the initial point).
    pub loglik_trace: Vec<f64>,
}

struct Problem {
    videos: Vec<String>,
    subjects: Vec<String>,
    /// (video, subject, score), sorted
    obs: Vec<(usize, usize, f64)>,
    by_video: Vec<Vec<usize>>,
    by_subject: Vec<Vec<usize>>,
}

impl Problem {
    fn build(records: &[RatingRecord]) -> Result<Problem> {
        if records.is_empty() {
            return Err(Error::InvalidInput("no ratings".into()));
        }
        let mut videos: Vec<String> = records.iter().map(|r| r.video_id.clone()).collect();
        videos.sort();
        videos.dedup();
        let mut subjects: Vec<String> = records.iter().map(|r| r.subject_id.clone()).collect();
        subjects.sort();
        subjects.dedup();
        let vid: BTreeMap<&str, usize> = videos.iter().enumerate().map(|(k, v)| (v.as_str(), k)).collect();
        let sid: BTreeMap<&str, usize> = subjects.iter().enumerate().map(|(k, v)| (v.as_str(), k)).collect();
        let mut obs: Vec<(usize, usize, f64)> =
            records.iter().map(|r| (vid[r.video_id.as_str()], sid[r.subject_id.as_str()], r.score)).collect();
        crate::error::ensure_finite(&obs.iter().map(|o| o.2).collect::<Vec<_>>(), "ratings")?;
        obs.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)).then(a.2.total_cmp(&b.2)));
        let mut by_video = vec![Vec::new(); videos.len()];
        let mut by_subject = vec![Vec::new(); subjects.len()];
        for (k, &(v, s, _)) in obs.iter().enumerate() {
            by_video[v].push(k);
            by_subject[s].push(k);
        }
        if let Some((k, _)) = by_video.iter().enumerate().find(|(_, l)| l.len() < 2) {
            return Err(Error::InvalidInput(format!("video {} has fewer than 2 ratings", videos[k])));
        }
        if let Some((k, _)) = by_subject.iter().enumerate().find(|(_, l)| l.len() < 2) {
            return Err(Error::InvalidInput(format!("subject {} has fewer than 2 ratings", subjects[k])));
        }
        Ok(Problem { videos, subjects, obs, by_video, by_subject })
    }

    fn loglik(&self, psi: &[f64], bias: &[f64], nu: &[f64]) -> f64 {
        const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;
        self.obs
            .iter()
            .map(|&(v, s, x)| {
                let r = x - psi[v] - bias[s];
                -HALF_LN_2PI - nu[s].ln() - r * r / (2.0 * nu[s] * nu[s])
            })
            .sum()
    }
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn fit(records: &[RatingRecord]) -> Result<SurealEstimate> {
    fit_with(records, &SurealConfig::default())
}

pub fn fit_with(records: &[RatingRecord], cfg: &SurealConfig) -> Result<SurealEstimate> {
    if !(cfg.nu_floor > 0.0) {
        return Err(Error::Config("nu_floor must be positive".into()));
    }
    let p = Problem::build(records)?;
    let (nv, ns) = (p.videos.len(), p.subjects.len());

    let mut psi: Vec<f64> = p.by_video.iter().map(|l| l.iter().map(|&k| p.obs[k].2).sum::<f64>() / l.len() as f64).collect();
    let mut bias = vec![0.0; ns];
    let mut nu = vec![1.0; ns];
    let mut trace = vec![p.loglik(&psi, &bias, &nu)];
    let mut converged = false;
    let mut iterations = 0;

    while iterations < cfg.max_iters {
        iterations += 1;
        let (psi0, bias0, nu0) = (psi.clone(), bias.clone(), nu.clone());

        for v in 0..nv {
            let (mut num, mut den) = (0.0, 0.0);
            for &k in &p.by_video[v] {
                let (_, s, x) = p.obs[k];
                let w = 1.0 / (nu[s] * nu[s]);
                num += (x - bias[s]) * w;
                den += w;
            }
            psi[v] = num / den;
        }

        for s in 0..ns {
            let l = &p.by_subject[s];
            bias[s] = l.iter().map(|&k| p.obs[k].2 - psi[p.obs[k].0]).sum::<f64>() / l.len() as f64;
        }
        let shift = bias.iter().sum::<f64>() / ns as f64;
        bias.iter_mut().for_each(|b| *b -= shift);
        psi.iter_mut().for_each(|x| *x += shift);

        for s in 0..ns {
            let l = &p.by_subject[s];
            let ms = l
                .iter()
                .map(|&k| {
                    let (v, _, x) = p.obs[k];
                    (x - psi[v] - bias[s]).powi(2)
                })
                .sum::<f64>()
                / l.len() as f64;
            nu[s] = ms.sqrt().max(cfg.nu_floor);
        }

        let ll = p.loglik(&psi, &bias, &nu);
        if !ll.is_finite() {
            return Err(Error::Numerical("log-likelihood became non-finite".into()));
        }
        trace.push(ll);

        let change = max_abs_diff(&psi, &psi0).max(max_abs_diff(&bias, &bias0)).max(max_abs_diff(&nu, &nu0));
        if change < cfg.tol {
            converged = true;
            break;
        }
    }
    if !converged {
        log::warn!("SUREAL did not converge within {} iterations", cfg.max_iters);
    }

    let mut ci95 = BTreeMap::new();
    for v in 0..nv {
        let info: f64 = p.by_video[v].iter().map(|&k| 1.0 / nu[p.obs[k].1].powi(2)).sum();
        let half = 1.96 / info.sqrt();
        ci95.insert(p.videos[v].clone(), (psi[v] - half, psi[v] + half));
    }
    Ok(SurealEstimate {
        psi: p.videos.iter().cloned().zip(psi).collect(),
        bias: p.subjects.iter().cloned().zip(bias).collect(),
        inconsistency: p.subjects.iter().cloned().zip(nu).collect(),
        ci95,
        loglik: *trace.last().expect("non-empty trace"),
        iterations,
        converged,
        loglik_trace: trace,
    })
}

pub const MOS_HEADER: [&str; 4] = ["video_id", "psi", "ci_lo", "ci_hi"];
pub const SUBJECT_HEADER: [&str; 3] = ["subject_id", "bias", "inconsistency"];

pub fn write_mos<W: Write>(w: W, est: &SurealEstimate) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(MOS_HEADER)?;
    for (id, &psi) in &est.psi {
        let (lo, hi) = est.ci95[id];
        wr.write_record([id.as_str(), &decimal17(psi), &decimal17(lo), &decimal17(hi)])?;
    }
    wr.flush()?;
    Ok(())
}

pub fn write_subjects<W: Write>(w: W, est: &SurealEstimate) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(SUBJECT_HEADER)?;
    for (id, &b) in &est.bias {
        wr.write_record([id.as_str(), &decimal17(b), &decimal17(est.inconsistency[id])])?;
    }
    wr.flush()?;
    Ok(())
}

/// Read a `video_id,psi,ci_lo,ci_hi` table into a map of `psi`.
pub fn read_mos<R: std::io::Read>(r: R) -> Result<BTreeMap<String, f64>> {
    let mut rd = csv::Reader::from_reader(r);
    let header = rd.headers()?.clone();
    if header.iter().collect::<Vec<_>>() != MOS_HEADER {
        return Err(Error::InvalidInput(format!("unexpected MOS header: {:?}", header)));
    }
    let mut out = BTreeMap::new();
    for (k, row) in rd.records().enumerate() {
        let row = row?;
        let psi: f64 = row[1].parse().map_err(|_| Error::InvalidInput(format!("MOS line {}: bad psi {:?}", k + 2, &row[1])))?;
        out.insert(row[0].to_string(), psi);
    }
    Ok(out)
}
