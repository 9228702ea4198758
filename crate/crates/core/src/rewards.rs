//! Format, Gaussian score and group self-consistency rewards.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::Completion;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub r_fmt: f64,
    pub r_sc: f64,
    pub r_self: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardWeights {
    pub w_fmt: f64,
    pub w_sc: f64,
    pub w_self: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        RewardWeights { w_fmt: 0.2, w_sc: 1.0, w_self: 0.2 }
    }
}

impl RewardWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in [("w_fmt", self.w_fmt), ("w_sc", self.w_sc), ("w_self", self.w_self)] {
            if !w.is_finite() || w < 0.0 {
                return Err(Error::Config(format!("reward weight {name} must be finite and >= 0, got {w}")));
            }
        }
        Ok(())
    }
}

pub fn format_reward(c: &Completion) -> f64 {
    if c.extracted_score.is_some() {
        1.0
    } else {
        0.0
    }
}

/// `alpha * exp(-(pred - target)^2 / (2 sigma^2))`.
pub fn score_reward(pred: u8, target: f64, sigma: f64, alpha: f64) -> Result<f64> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::InvalidInput(format!("sigma must be > 0, got {sigma}")));
    }
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::InvalidInput(format!("alpha must lie in (0,1], got {alpha}")));
    }
    if !target.is_finite() {
        return Err(Error::NonFinite("score target"));
    }
    let e = pred as f64 - target;
    Ok(alpha * (-(e * e) / (2.0 * sigma * sigma)).exp())
}

/// Majority answer of a group; ties between scores go to the smallest score.
/// Format-invalid members form their own answer, which wins only when it
/// strictly outnumbers every score (then the result is `None`).
pub fn majority_score(scores: &[Option<u8>]) -> Option<u8> {
    let mut counts: BTreeMap<u8, usize> = BTreeMap::new();
    for s in scores.iter().flatten() {
        *counts.entry(*s).or_default() += 1;
    }
    // BTreeMap iterates ascending, and only a strictly larger count replaces the best
    let mut best: Option<(u8, usize)> = None;
    for (&s, &n) in &counts {
        if best.is_none_or(|(_, bn)| n > bn) {
            best = Some((s, n));
        }
    }
    let invalid = scores.iter().filter(|s| s.is_none()).count();
    best.filter(|&(_, n)| n >= invalid).map(|(s, _)| s)
}

pub fn self_reward_scores(scores: &[Option<u8>]) -> Vec<f64> {
    let maj = majority_score(scores);
    scores
        .iter()
        .map(|s| match (s, maj) {
            (Some(a), Some(m)) if *a == m => 1.0,
            _ => 0.0,
        })
        .collect()
}

pub fn self_reward(group: &[Completion]) -> Result<Vec<f64>> {
    if group.len() < 2 {
        return Err(Error::InvalidInput(format!("self reward needs a group of >= 2, got {}", group.len())));
    }
    let scores: Vec<Option<u8>> = group.iter().map(|c| c.extracted_score).collect();
    Ok(self_reward_scores(&scores))
}

pub fn total_reward(r_fmt: f64, r_sc: f64, r_self: f64, w: &RewardWeights) -> RewardBreakdown {
    RewardBreakdown { r_fmt, r_sc, r_self, total: w.w_fmt * r_fmt + w.w_sc * r_sc + w.w_self * r_self }
}

/// Reward breakdown of every member of one group against a target MOS.
/// Format-invalid members get `r_sc = 0`.
pub fn group_rewards(
    group: &[Completion],
    target: f64,
    sigma: f64,
    alpha: f64,
    weights: &RewardWeights,
) -> Result<Vec<RewardBreakdown>> {
    let selfr = self_reward(group)?;
    group
        .iter()
        .zip(selfr)
        .map(|(c, rs)| {
            let r_sc = match c.extracted_score {
                Some(s) => score_reward(s, target, sigma, alpha)?,
                None => 0.0,
            };
            Ok(total_reward(format_reward(c), r_sc, rs, weights))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn completion(score: Option<u8>) -> Completion {
        Completion {
            tokens: vec![],
            old_logprobs: vec![],
            pathway_logprobs_hdr: vec![],
            pathway_logprobs_sdr: vec![],
            extracted_score: score,
            per_token_entropy: vec![],
        }
    }

    #[test]
    fn format_reward_cases() {
        assert_eq!(format_reward(&completion(Some(3))), 1.0);
        assert_eq!(format_reward(&completion(None)), 0.0);
    }

    #[test]
    fn gaussian_values() {
        assert_eq!(score_reward(50, 50.0, 3.0, 1.0).unwrap(), 1.0);
        assert!((score_reward(53, 50.0, 3.0, 1.0).unwrap() - (-0.5f64).exp()).abs() < 1e-15);
        assert!(score_reward(80, 50.0, 3.0, 1.0).unwrap() < 2e-22);
        assert!(score_reward(50, 50.0, 0.0, 1.0).is_err());
        assert!(score_reward(50, 50.0, 3.0, 1.5).is_err());
    }

    #[test]
    fn self_reward_examples() {
        let g: Vec<_> = [72, 72, 65].iter().map(|&s| completion(Some(s))).collect();
        assert_eq!(self_reward(&g).unwrap(), vec![1.0, 1.0, 0.0]);
        let g: Vec<_> = [10, 20].iter().map(|&s| completion(Some(s))).collect();
        assert_eq!(self_reward(&g).unwrap(), vec![1.0, 0.0]);
        // invalid answers outnumber the score: nobody is rewarded
        let g = vec![completion(None), completion(None), completion(Some(4))];
        assert_eq!(self_reward(&g).unwrap(), vec![0.0, 0.0, 0.0]);
        let g = vec![completion(None), completion(Some(4))];
        assert_eq!(self_reward(&g).unwrap(), vec![0.0, 1.0]);
        assert!(self_reward(&g[..1]).is_err());
    }

    #[test]
    fn total_examples() {
        let w = RewardWeights::default();
        let b = total_reward(1.0, 0.6065, 1.0, &w);
        assert!((b.total - 1.0065).abs() < 1e-12);
        assert_eq!(total_reward(0.0, 0.0, 0.0, &w).total, 0.0);
        let w = RewardWeights { w_fmt: 1.0, w_sc: 0.0, w_self: 0.0 };
        assert_eq!(total_reward(1.0, 0.3, 1.0, &w).total, 1.0);
    }
}
