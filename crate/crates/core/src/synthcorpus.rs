//! Synthetic HDR "videos" as feature vectors.
//!
//! Each instance carries an HDR feature vector in `[0,1]^d`, its tone-mapped
//! SDR counterpart and a latent quality score. Feature slices (default
//! `d = 8`):
//!
//! | slice  | role                 | what tone mapping does              |
//! |--------|----------------------|-------------------------------------|
//! | `0..2` | highlight detail     | clipped at `c_hi`, then quantized   |
//! | `2..4` | near-black detail    | lifted to `c_lo`, then quantized    |
//! | `4..6` | SDR-visible content  | quantized                           |
//! | `6..8` | HDR-only signal      | lives inside one quantization bin   |
//!
//! Dimension 5 carries the encode fidelity of the distortion rung, so the
//! rung is observable (coarsely after quantization) from both domains.

use std::fmt;
use std::io::{BufRead, Write};
use std::ops::Range;

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, stream};
use crate::serial::{decimal17, decimal17_array};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ResolutionLabel {
    #[serde(rename = "r360p")]
    R360p,
    #[serde(rename = "r720p")]
    R720p,
    #[serde(rename = "r1080p")]
    R1080p,
    #[serde(rename = "reference")]
    Reference,
}

impl ResolutionLabel {
    fn as_str(self) -> &'static str {
        match self {
            ResolutionLabel::R360p => "r360p",
            ResolutionLabel::R720p => "r720p",
            ResolutionLabel::R1080p => "r1080p",
            ResolutionLabel::Reference => "reference",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Bitrate {
    Mbps(f64),
    Reference(ReferenceTag),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReferenceTag {
    Reference,
}

/// One rung of the encoding ladder.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawRung")]
pub struct DistortionRung {
    pub resolution_label: ResolutionLabel,
    pub bitrate_mbps: Bitrate,
}

#[derive(Deserialize)]
struct RawRung {
    resolution_label: ResolutionLabel,
    bitrate_mbps: Bitrate,
}

impl TryFrom<RawRung> for DistortionRung {
    type Error = Error;
    fn try_from(raw: RawRung) -> Result<Self> {
        DistortionRung::new(raw.resolution_label, raw.bitrate_mbps)
    }
}

const LADDER_360P: [f64; 2] = [0.2, 0.5];
const LADDER_720P: [f64; 3] = [0.5, 1.0, 2.0];
const LADDER_1080P: [f64; 4] = [1.0, 2.0, 3.0, 5.0];

impl DistortionRung {
    pub fn new(resolution_label: ResolutionLabel, bitrate_mbps: Bitrate) -> Result<Self> {
        let ok = match (resolution_label, bitrate_mbps) {
            (ResolutionLabel::Reference, Bitrate::Reference(_)) => true,
            (ResolutionLabel::R360p, Bitrate::Mbps(b)) => LADDER_360P.contains(&b),
            (ResolutionLabel::R720p, Bitrate::Mbps(b)) => LADDER_720P.contains(&b),
            (ResolutionLabel::R1080p, Bitrate::Mbps(b)) => LADDER_1080P.contains(&b),
            _ => false,
        };
        if !ok {
            return Err(Error::InvalidInput(format!(
                "rung ({resolution_label:?}, {bitrate_mbps:?}) is not on the bitrate ladder"
            )));
        }
        Ok(DistortionRung { resolution_label, bitrate_mbps })
    }

    pub fn mbps(resolution: ResolutionLabel, mbps: f64) -> Result<Self> {
        Self::new(resolution, Bitrate::Mbps(mbps))
    }

    pub fn reference() -> Self {
        DistortionRung { resolution_label: ResolutionLabel::Reference, bitrate_mbps: Bitrate::Reference(ReferenceTag::Reference) }
    }

    pub fn is_reference(&self) -> bool {
        self.resolution_label == ResolutionLabel::Reference
    }

    /// The full ten-rung ladder, reference first.
    pub fn full_ladder() -> Vec<DistortionRung> {
        let mut out = vec![DistortionRung::reference()];
        for &b in LADDER_1080P.iter().rev() {
            out.push(DistortionRung::mbps(ResolutionLabel::R1080p, b).unwrap());
        }
        for &b in LADDER_720P.iter().rev() {
            out.push(DistortionRung::mbps(ResolutionLabel::R720p, b).unwrap());
        }
        for &b in LADDER_360P.iter().rev() {
            out.push(DistortionRung::mbps(ResolutionLabel::R360p, b).unwrap());
        }
        out
    }

    /// Quality penalty in MOS points. Monotone: non-increasing in bitrate at
    /// fixed resolution and in resolution at fixed bitrate; zero for the
    /// reference.
    pub fn penalty(&self) -> f64 {
        match (self.resolution_label, self.bitrate_mbps) {
            (ResolutionLabel::Reference, _) => 0.0,
            (ResolutionLabel::R1080p, Bitrate::Mbps(b)) => match b {
                b if b >= 5.0 => 3.0,
                b if b >= 3.0 => 5.0,
                b if b >= 2.0 => 8.0,
                _ => 12.0,
            },
            (ResolutionLabel::R720p, Bitrate::Mbps(b)) => match b {
                b if b >= 2.0 => 10.0,
                b if b >= 1.0 => 14.0,
                _ => 19.0,
            },
            (ResolutionLabel::R360p, Bitrate::Mbps(b)) => {
                if b >= 0.5 {
                    22.0
                } else {
                    27.0
                }
            }
            _ => unreachable!("rung validated at construction"),
        }
    }

    /// Encode fidelity in `[0.1, 1]`, a decreasing function of the penalty.
    pub fn fidelity(&self) -> f64 {
        1.0 - self.penalty() / 30.0
    }
}

impl fmt::Display for DistortionRung {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.bitrate_mbps {
            Bitrate::Mbps(b) => write!(f, "{}@{}Mbps", self.resolution_label.as_str(), b),
            Bitrate::Reference(_) => write!(f, "reference"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Orientation {
    Landscape,
    Portrait,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoInstance {
    pub id: String,
    pub hdr_features: Vec<f64>,
    pub sdr_features: Vec<f64>,
    pub true_mos: f64,
    pub rung: DistortionRung,
    pub orientation: Orientation,
}

/// Toy tone-mapping operator: highlight clip, black lift, uniform quantization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToneMap {
    pub highlight: Range<usize>,
    pub near_black: Range<usize>,
    pub c_hi: f64,
    pub c_lo: f64,
    pub levels: u32,
}

impl Default for ToneMap {
    fn default() -> Self {
        ToneMap { highlight: 0..2, near_black: 2..4, c_hi: 0.8, c_lo: 0.1, levels: 8 }
    }
}

impl ToneMap {
    pub fn validate(&self) -> Result<()> {
        if self.levels < 2 {
            return Err(Error::Config("tone map needs at least 2 quantization levels".into()));
        }
        if !(0.0..=1.0).contains(&self.c_lo) || !(0.0..=1.0).contains(&self.c_hi) {
            return Err(Error::Config("tone map clamp bounds must lie in [0,1]".into()));
        }
        Ok(())
    }

    pub fn quantize(&self, x: f64) -> f64 {
        let steps = (self.levels - 1) as f64;
        (x * steps).round() / steps
    }

    pub fn apply(&self, hdr: &[f64]) -> Result<Vec<f64>> {
        crate::error::ensure_finite(hdr, "tone_map input")?;
        let out = hdr
            .iter()
            .enumerate()
            .map(|(k, &x)| {
                let mut y = x;
                if self.highlight.contains(&k) {
                    y = y.min(self.c_hi);
                }
                if self.near_black.contains(&k) {
                    y = y.max(self.c_lo);
                }
                self.quantize(y)
            })
            .collect();
        Ok(out)
    }
}

pub fn tone_map(hdr_features: &[f64]) -> Result<Vec<f64>> {
    ToneMap::default().apply(hdr_features)
}

/// Affine latent-quality model. `mos = intercept + weights . x - penalty(rung)
/// - orientation_penalty * [portrait]`, clipped to `[mos_min, mos_max]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MosModel {
    pub intercept: f64,
    pub weights: Vec<f64>,
    pub portrait_penalty: f64,
    pub mos_min: f64,
    pub mos_max: f64,
}

impl Default for MosModel {
    fn default() -> Self {
        MosModel {
            intercept: -126.0,
            weights: vec![8.0, 8.0, -24.0, -24.0, 30.0, 0.0, 150.0, 150.0],
            portrait_penalty: 0.0,
            mos_min: 10.0,
            mos_max: 95.0,
        }
    }
}

impl MosModel {
    pub fn unclipped(&self, hdr: &[f64], rung: &DistortionRung, orientation: Orientation) -> f64 {
        let lin: f64 = self.weights.iter().zip(hdr).map(|(w, x)| w * x).sum();
        let orient = match orientation {
            Orientation::Landscape => 0.0,
            Orientation::Portrait => self.portrait_penalty,
        };
        self.intercept + lin - rung.penalty() - orient
    }

    pub fn mos(&self, hdr: &[f64], rung: &DistortionRung, orientation: Orientation) -> f64 {
        self.unclipped(hdr, rung, orientation).clamp(self.mos_min, self.mos_max)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub n: usize,
    pub d_hdr: usize,
    pub ladder: Vec<DistortionRung>,
    pub tone_map: ToneMap,
    pub mos: MosModel,
    /// Source sampling ranges per slice.
    pub highlight_range: (f64, f64),
    pub near_black_range: (f64, f64),
    pub content: Range<usize>,
    pub hdr_only: Range<usize>,
    /// Quantization level the HDR-only signal sits on.
    pub hdr_only_level: u32,
    /// Fraction of the quantization bin the HDR-only signal spans.
    pub hdr_only_span: f64,
    pub fidelity_dim: usize,
    pub portrait_fraction: f64,
    pub id_prefix: String,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            n: 400,
            d_hdr: 8,
            ladder: DistortionRung::full_ladder(),
            tone_map: ToneMap::default(),
            mos: MosModel::default(),
            highlight_range: (0.55, 1.0),
            near_black_range: (0.0, 0.25),
            content: 4..6,
            hdr_only: 6..8,
            hdr_only_level: 4,
            hdr_only_span: 0.95,
            fidelity_dim: 5,
            portrait_fraction: 0.5,
            id_prefix: "v".to_string(),
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::InvalidInput("corpus size must be positive".into()));
        }
        if self.ladder.is_empty() {
            return Err(Error::InvalidInput("bitrate ladder is empty".into()));
        }
        if self.mos.weights.len() != self.d_hdr {
            return Err(Error::Config(format!(
                "mos weights have length {}, expected d_hdr = {}",
                self.mos.weights.len(),
                self.d_hdr
            )));
        }
        for r in [&self.tone_map.highlight, &self.tone_map.near_black, &self.content, &self.hdr_only] {
            if r.end > self.d_hdr || r.start > r.end {
                return Err(Error::Config(format!("slice {r:?} out of range for d_hdr = {}", self.d_hdr)));
            }
        }
        if self.fidelity_dim >= self.d_hdr {
            return Err(Error::Config("fidelity_dim out of range".into()));
        }
        if self.hdr_only_level == 0 || self.hdr_only_level + 1 >= self.tone_map.levels {
            return Err(Error::Config("hdr_only_level must be an interior quantization level".into()));
        }
        if !(0.0..1.0).contains(&self.hdr_only_span) {
            return Err(Error::Config("hdr_only_span must lie in [0,1)".into()));
        }
        self.tone_map.validate()
    }

    fn bin_width(&self) -> f64 {
        1.0 / (self.tone_map.levels - 1) as f64
    }

    /// Centre of the quantization bin holding the HDR-only signal.
    pub fn hdr_only_center(&self) -> f64 {
        self.hdr_only_level as f64 * self.bin_width()
    }

    /// Draw the rung-independent source features of one clip.
    pub fn sample_source(&self, rng: &mut rng::Rng) -> Vec<f64> {
        let mut x = vec![0.0; self.d_hdr];
        for (k, xk) in x.iter_mut().enumerate() {
            *xk = if self.tone_map.highlight.contains(&k) {
                rng.random_range(self.highlight_range.0..=self.highlight_range.1)
            } else if self.tone_map.near_black.contains(&k) {
                rng.random_range(self.near_black_range.0..=self.near_black_range.1)
            } else if self.hdr_only.contains(&k) {
                let u: f64 = rng.random();
                self.hdr_only_center() + (u - 0.5) * self.hdr_only_span * self.bin_width()
            } else {
                rng.random()
            };
        }
        x
    }

    /// Apply the encoding rung to source features. Only the fidelity
    /// dimension changes.
    pub fn encode(&self, source: &[f64], rung: &DistortionRung) -> Vec<f64> {
        let mut x = source.to_vec();
        x[self.fidelity_dim] = rung.fidelity();
        x
    }

    pub fn instance(&self, id: String, source: &[f64], rung: DistortionRung, orientation: Orientation) -> Result<VideoInstance> {
        let hdr = self.encode(source, &rung);
        let sdr = self.tone_map.apply(&hdr)?;
        let true_mos = self.mos.mos(&hdr, &rung, orientation);
        Ok(VideoInstance { id, hdr_features: hdr, sdr_features: sdr, true_mos, rung, orientation })
    }
}

/// Generate `config.n` instances. Instance `k` is drawn from its own stream
/// keyed by `(seed, k)`, so generation order does not matter.
pub fn generate_corpus(config: &CorpusConfig, seed: u64) -> Result<Vec<VideoInstance>> {
    config.validate()?;
    let width = (config.n.max(1) as f64).log10().floor() as usize + 1;
    (0..config.n)
        .into_par_iter()
        .map(|k| {
            let mut r = rng::rng(rng::derive(seed, &[stream::CORPUS, k as u64]));
            let source = config.sample_source(&mut r);
            let rung = config.ladder[r.random_range(0..config.ladder.len())];
            let orientation =
                if r.random::<f64>() < config.portrait_fraction { Orientation::Portrait } else { Orientation::Landscape };
            let id = format!("{}{:0width$}", config.id_prefix, k, width = width.max(4));
            config.instance(id, &source, rung, orientation)
        })
        .collect()
}

fn json_string(s: &str) -> String {
    serde_json::to_string(s).expect("string serialization")
}

/// One JSON object per instance, reals in 17-significant-digit decimal.
pub fn instance_to_json_line(v: &VideoInstance) -> String {
    let bitrate = match v.rung.bitrate_mbps {
        Bitrate::Mbps(b) => decimal17(b),
        Bitrate::Reference(_) => "\"reference\"".to_string(),
    };
    let orientation = match v.orientation {
        Orientation::Landscape => "landscape",
        Orientation::Portrait => "portrait",
    };
    format!(
        "{{\"id\":{},\"hdr_features\":{},\"sdr_features\":{},\"true_mos\":{},\"rung\":{{\"resolution_label\":\"{}\",\"bitrate_mbps\":{}}},\"orientation\":\"{}\"}}",
        json_string(&v.id),
        decimal17_array(&v.hdr_features),
        decimal17_array(&v.sdr_features),
        decimal17(v.true_mos),
        v.rung.resolution_label.as_str(),
        bitrate,
        orientation
    )
}

pub fn write_corpus<W: Write>(mut w: W, corpus: &[VideoInstance]) -> Result<()> {
    for v in corpus {
        writeln!(w, "{}", instance_to_json_line(v))?;
    }
    Ok(())
}

pub fn read_corpus<R: BufRead>(r: R) -> Result<Vec<VideoInstance>> {
    let mut out = Vec::new();
    for (lineno, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let v: VideoInstance =
            serde_json::from_str(&line).map_err(|e| Error::InvalidInput(format!("corpus line {}: {e}", lineno + 1)))?;
        if v.hdr_features.len() != v.sdr_features.len() {
            return Err(Error::InvalidInput(format!("corpus line {}: hdr/sdr feature lengths differ", lineno + 1)));
        }
        out.push(v);
    }
    Ok(out)
}
