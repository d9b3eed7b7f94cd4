//! Run configuration: one JSON document, every field optional.

use std::path::{Path, PathBuf};

use emospace_core::data::SynthConfig;
use emospace_core::guidance::{
    BlendSchedule, GuidanceConfig, DEFAULT_ALPHA_ATTN, DEFAULT_HEADS, DEFAULT_NEG_SCALE, DEFAULT_TAU_TEMP,
};
use emospace_core::linalg::Mat;
use emospace_core::refine::{DEFAULT_EPS_CONV, DEFAULT_MAX_ITERS};
use emospace_core::training::{LossWeights, TrainConfig};
use emospace_core::{EmoError, Rng};
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Offset separating the head-projection stream from the training streams.
const GUIDANCE_STREAM: u64 = 0x9E37_79B9_7F4A_7C15;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub synth: SynthConfig,
    pub train: TrainConfig,
    pub loss_weights: LossWeights,
    pub guidance: GuidanceSection,
    pub blend: BlendSchedule,
    pub refine: RefineSection,
    pub paths: PathsSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GuidanceSection {
    pub k_pos: usize,
    pub k_neg: usize,
    pub tau_temp: f64,
    pub alpha_attn: f64,
    pub heads: usize,
    pub renormalize_rows: bool,
    pub neg_scale: f64,
}

impl Default for GuidanceSection {
    fn default() -> Self {
        Self {
            k_pos: 4,
            k_neg: 0,
            tau_temp: DEFAULT_TAU_TEMP,
            alpha_attn: DEFAULT_ALPHA_ATTN,
            heads: DEFAULT_HEADS,
            renormalize_rows: false,
            neg_scale: DEFAULT_NEG_SCALE,
        }
    }
}

impl GuidanceSection {
    /// Guidance parameters with a head projection drawn from `seed`.
    pub fn build(&self, dim: usize, seed: u64) -> GuidanceConfig {
        let mut rng = Rng::new(seed.wrapping_add(GUIDANCE_STREAM));
        let base = GuidanceConfig::new(dim, self.heads, &mut rng);
        self.apply(base.wp)
    }

    pub fn apply(&self, wp: Mat) -> GuidanceConfig {
        GuidanceConfig {
            k_pos: self.k_pos,
            k_neg: self.k_neg,
            tau_temp: self.tau_temp,
            alpha_attn: self.alpha_attn,
            wp,
            renormalize_rows: self.renormalize_rows,
            neg_scale: self.neg_scale,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RefineSection {
    pub max_iters: usize,
    pub eps_conv: f64,
}

impl Default for RefineSection {
    fn default() -> Self {
        Self {
            max_iters: DEFAULT_MAX_ITERS,
            eps_conv: DEFAULT_EPS_CONV,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsSection {
    pub dataset: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub report: Option<PathBuf>,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let cfg = match path {
            None => Self::default(),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| {
                    CliError::new(3, format!("cannot read config {}: {e}", p.display()))
                })?;
                serde_json::from_str(&text).map_err(|e| {
                    CliError::new(2, format!("invalid config {}: {e}", p.display()))
                })?
            }
        };
        Ok(cfg)
    }

    /// Check every section before any work starts.
    pub fn validate(&self) -> anyhow::Result<()> {
        let config_err = |section: &str, e: EmoError| CliError::new(2, format!("config section {section}: {e}"));
        self.synth.validate().map_err(|e| config_err("synth", e))?;
        self.train.validate().map_err(|e| config_err("train", e))?;
        self.loss_weights.validate().map_err(|e| config_err("loss_weights", e))?;
        self.blend.validate().map_err(|e| config_err("blend", e))?;
        let g = &self.guidance;
        if g.heads == 0 {
            return Err(CliError::new(2, "config section guidance: heads must be positive").into());
        }
        g.apply(Mat::zeros(g.heads, 1))
            .validate()
            .map_err(|e| config_err("guidance", e))?;
        if self.refine.max_iters == 0 || !(self.refine.eps_conv > 0.0) {
            return Err(CliError::new(2, "config section refine: max_iters and eps_conv must be positive").into());
        }
        Ok(())
    }
}
