//! Experiment configuration: one nested document covering every stage.
//!
//! TOML is the human-edited form; JSON is accepted as the interchange form.
//! Unknown keys are rejected at every level.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encalign::EncoderConfig;
use crate::error::{Error, Result};
use crate::hapo::HapoConfig;
use crate::policy::{FormatPrior, PolicyShape, Vocabulary};
use crate::studysim::{PopulationConfig, QcPolicy, StudyDesign};
use crate::sureal::SurealConfig;
use crate::synthcorpus::CorpusConfig;
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StudyConfig {
    pub population: PopulationConfig,
    pub design: StudyDesign,
    /// Population the golden pilot panel is drawn from (honest raters only).
    pub pilot_population: PopulationConfig,
}

impl Default for StudyConfig {
    fn default() -> Self {
        StudyConfig {
            // one 94-video session per subject, with injected bad raters
            population: PopulationConfig {
                n_honest: 170,
                n_random_clickers: 10,
                n_speeders: 5,
                n_constant: 5,
                ..PopulationConfig::default()
            },
            design: StudyDesign::default(),
            pilot_population: PopulationConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicyConfig {
    pub d_emb: usize,
    pub t_max: usize,
    pub n_reasoning: usize,
    pub prior: FormatPrior,
    /// Put the prior's score centre on the mean training MOS.
    pub center_on_targets: bool,
    /// Scale context features to unit variance (centring is always applied).
    pub standardize: bool,
    /// Feed tone-mapped features into the HDR slice (an HDR-blind encoder).
    pub hdr_blind: bool,
}

impl PolicyConfig {
    pub fn shape(&self, d_hdr: usize) -> PolicyShape {
        PolicyShape {
            d_hdr,
            d_sdr: d_hdr,
            d_emb: self.d_emb,
            t_max: self.t_max,
            vocab: Vocabulary { n_reasoning: self.n_reasoning },
        }
    }
}

impl Default for PolicyConfig {
    fn default() -> Self {
        let shape = PolicyShape::default();
        PolicyConfig {
            d_emb: shape.d_emb,
            t_max: shape.t_max,
            n_reasoning: shape.vocab.n_reasoning,
            prior: FormatPrior::default(),
            center_on_targets: true,
            standardize: false,
            hdr_blind: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Fraction of corpus videos held out from training.
    pub test_fraction: f64,
    /// Sampled rollouts per context for the pathway-information diagnostic.
    pub mi_rollouts: usize,
    /// Report PLCC after a 4-parameter logistic fit instead of raw PLCC.
    pub logistic_plcc: bool,
    /// Training seeds per ablation variant, starting at `train.seed`.
    pub paired_seeds: usize,
    /// Train the alignment encoder and report its caption distances.
    pub encoder: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { test_fraction: 0.25, mi_rollouts: 4, logistic_plcc: false, paired_seeds: 5, encoder: true }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(Error::Config(format!("test_fraction must lie in (0, 1), got {}", self.test_fraction)));
        }
        if self.mi_rollouts == 0 {
            return Err(Error::Config("mi_rollouts must be >= 1".into()));
        }
        if self.paired_seeds == 0 {
            return Err(Error::Config("paired_seeds must be >= 1".into()));
        }
        Ok(())
    }
}

/// Training schedule used by experiments: a long projection-only stage at a
/// high rate, then a short full fine-tune at a low rate.
pub fn experiment_train_config() -> TrainConfig {
    TrainConfig { stage1_iters: Some(800), stage1_lr: Some(0.01), stage2_iters: 200, lr: 3e-4, ..TrainConfig::default() }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Seeds the corpus, the study, QC, and the train/test split.
    pub seed: u64,
    pub corpus: CorpusConfig,
    pub study: StudyConfig,
    pub qc: QcPolicy,
    pub sureal: SurealConfig,
    pub hapo: HapoConfig,
    /// `train.seed` seeds policy initialisation and sampling.
    pub train: TrainConfig,
    pub policy: PolicyConfig,
    pub eval: EvalConfig,
    pub encoder: EncoderConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            corpus: CorpusConfig::default(),
            study: StudyConfig::default(),
            qc: QcPolicy::default(),
            sureal: SurealConfig::default(),
            hapo: HapoConfig::default(),
            train: experiment_train_config(),
            policy: PolicyConfig::default(),
            eval: EvalConfig::default(),
            encoder: EncoderConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        self.hapo.validate()?;
        self.train.validate()?;
        self.eval.validate()?;
        self.encoder.validate()?;
        Ok(())
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let c: ExperimentConfig = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let c: ExperimentConfig = serde_json::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    /// `.json` files are parsed as JSON, everything else as TOML.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json")) {
            Self::from_json_str(&text)
        } else {
            Self::from_toml_str(&text)
        }
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_json_string(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_both_formats() {
        let c = ExperimentConfig::default();
        let t = c.to_toml_string().unwrap();
        assert_eq!(ExperimentConfig::from_toml_str(&t).unwrap(), c);
        let j = c.to_json_string().unwrap();
        assert_eq!(ExperimentConfig::from_json_str(&j).unwrap(), c);
    }

    #[test]
    fn empty_document_is_all_defaults() {
        assert_eq!(ExperimentConfig::from_toml_str("").unwrap(), ExperimentConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(ExperimentConfig::from_toml_str("seeed = 3").is_err());
        assert!(ExperimentConfig::from_toml_str("[hapo]\nkk = 8").is_err());
        assert!(ExperimentConfig::from_json_str(r#"{"study": {"design": {"foo": 1}}}"#).is_err());
    }

    #[test]
    fn partial_sections_keep_other_defaults() {
        let c = ExperimentConfig::from_toml_str("seed = 9\n[hapo]\ngamma = 0.0\n").unwrap();
        assert_eq!(c.seed, 9);
        assert_eq!(c.hapo.gamma, 0.0);
        assert_eq!(c.hapo.k, 8);
        assert_eq!(c.train, experiment_train_config());
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(ExperimentConfig::from_toml_str("[hapo]\nk = 1").is_err());
        assert!(ExperimentConfig::from_toml_str("[eval]\ntest_fraction = 1.0").is_err());
    }
}
