//! Synthetic HDR/SDR quality-assessment lab: corpus generation, a simulated
//! crowdsourced study with quality control, maximum-likelihood MOS recovery,
//! correlation metrics, a toy autoregressive scoring policy trained with the
//! HDR-aware policy objective, and dual-domain contrastive encoder losses.

pub mod config;
pub mod encalign;
pub mod error;
pub mod gradcheck;
pub mod hapo;
pub mod metrics;
pub mod optim;
pub mod pipeline;
pub mod policy;
pub mod rewards;
pub mod rng;
pub mod serial;
pub mod studysim;
pub mod sureal;
pub mod synthcorpus;
pub mod trainer;

pub use error::{Error, Result};
