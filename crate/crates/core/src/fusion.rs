//! Categorical head and attention-gated cross-modal fusion.
//!
//! ```text
//! logits = W2ᵀ · gelu(W1ᵀ · v)
//! g      = sigmoid(wgᵀ · gelu(Ug · [v; t]))
//! f      = g·v + (1 − g)·t
//! ```
//!
//! No bias terms appear in either layer.

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, EmoError, Result};
use crate::linalg::{dot, gelu, sigmoid, Mat};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FusionConfig {
    pub visual_dim: usize,
    pub text_dim: usize,
    pub head_hidden: usize,
    pub gate_hidden: usize,
    pub classes: usize,
}

impl FusionConfig {
    /// Desk-scale shape used by default.
    pub const DESK: FusionConfig = FusionConfig {
        visual_dim: 32,
        text_dim: 32,
        head_hidden: 16,
        gate_hidden: 16,
        classes: 8,
    };

    /// CLIP-H/14 scale: 1024-d embeddings, 256 head units, 512 gate units.
    pub const FULL_SCALE: FusionConfig = FusionConfig {
        visual_dim: 1024,
        text_dim: 1024,
        head_hidden: 256,
        gate_hidden: 512,
        classes: 8,
    };

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(EmoError::InvalidConfig(format!(
                "need at least 2 classes, got {}",
                self.classes
            )));
        }
        if self.visual_dim == 0 || self.head_hidden == 0 || self.gate_hidden == 0 {
            return Err(EmoError::InvalidConfig("zero-sized layer".into()));
        }
        if self.visual_dim != self.text_dim {
            return Err(EmoError::InvalidConfig(format!(
                "fusion requires equal visual and text dims, got {} and {}",
                self.visual_dim, self.text_dim
            )));
        }
        Ok(())
    }
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self::DESK
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionNet {
    /// `d_v × head_hidden`
    pub w1: Mat,
    /// `head_hidden × m`
    pub w2: Mat,
    /// `gate_hidden × (d_v + d_t)`
    pub ug: Mat,
    /// `gate_hidden`
    pub wg: Vec<f64>,
}

/// Intermediate activations of one sample, kept for the backward pass.
#[derive(Debug, Clone)]
pub(crate) struct ForwardCache {
    pub head_pre: Vec<f64>,
    pub head_act: Vec<f64>,
    pub logits: Vec<f64>,
    pub joint: Vec<f64>,
    pub gate_pre: Vec<f64>,
    pub gate_act: Vec<f64>,
    pub gate: f64,
    pub fused: Vec<f64>,
}

impl FusionNet {
    /// Gaussian init with std 1/√fan_in for every layer.
    pub fn init(cfg: &FusionConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let joint = cfg.visual_dim + cfg.text_dim;
        let w1 = Mat::gaussian(cfg.visual_dim, cfg.head_hidden, (cfg.visual_dim as f64).powf(-0.5), rng);
        let w2 = Mat::gaussian(cfg.head_hidden, cfg.classes, (cfg.head_hidden as f64).powf(-0.5), rng);
        let ug = Mat::gaussian(cfg.gate_hidden, joint, (joint as f64).powf(-0.5), rng);
        let wg = rng
            .normal_vec(cfg.gate_hidden)
            .into_iter()
            .map(|x| x * (cfg.gate_hidden as f64).powf(-0.5))
            .collect();
        Ok(Self { w1, w2, ug, wg })
    }

    pub fn from_parts(w1: Mat, w2: Mat, ug: Mat, wg: Vec<f64>) -> Result<Self> {
        let net = Self { w1, w2, ug, wg };
        net.validate()?;
        Ok(net)
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = self.config();
        cfg.validate()?;
        let shape_err = |what: &str| EmoError::InvariantViolation(format!("inconsistent {what} shape"));
        if self.w2.rows() != self.w1.cols() {
            return Err(shape_err("W2"));
        }
        if self.ug.cols() <= self.w1.rows() || self.ug.rows() != self.wg.len() {
            return Err(shape_err("gate"));
        }
        if !(self.w1.is_finite() && self.w2.is_finite() && self.ug.is_finite())
            || self.wg.iter().any(|x| !x.is_finite())
        {
            return Err(EmoError::InvariantViolation("non-finite parameter".into()));
        }
        Ok(())
    }

    pub fn config(&self) -> FusionConfig {
        FusionConfig {
            visual_dim: self.w1.rows(),
            text_dim: self.ug.cols().saturating_sub(self.w1.rows()),
            head_hidden: self.w1.cols(),
            gate_hidden: self.ug.rows(),
            classes: self.w2.cols(),
        }
    }

    pub fn classes(&self) -> usize {
        self.w2.cols()
    }

    pub fn classify(&self, v: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.w1.rows(), v.len())?;
        let hidden: Vec<f64> = self.w1.t_matvec(v)?.into_iter().map(gelu).collect();
        self.w2.t_matvec(&hidden)
    }

    pub fn gate(&self, v: &[f64], t: &[f64]) -> Result<f64> {
        let joint = self.joint(v, t)?;
        let act: Vec<f64> = self.ug.matvec(&joint)?.into_iter().map(gelu).collect();
        Ok(sigmoid(dot(&self.wg, &act)))
    }

    fn joint(&self, v: &[f64], t: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.w1.rows(), v.len())?;
        check_dim(self.ug.cols() - self.w1.rows(), t.len())?;
        let mut joint = Vec::with_capacity(v.len() + t.len());
        joint.extend_from_slice(v);
        joint.extend_from_slice(t);
        Ok(joint)
    }

    /// Gated fusion of one sample.
    pub fn fused(&self, v: &[f64], t: &[f64]) -> Result<Vec<f64>> {
        fuse(v, t, self.gate(v, t)?)
    }

    pub(crate) fn forward(&self, v: &[f64], t: &[f64]) -> Result<ForwardCache> {
        let joint = self.joint(v, t)?;
        let head_pre = self.w1.t_matvec(v)?;
        let head_act: Vec<f64> = head_pre.iter().copied().map(gelu).collect();
        let logits = self.w2.t_matvec(&head_act)?;
        let gate_pre = self.ug.matvec(&joint)?;
        let gate_act: Vec<f64> = gate_pre.iter().copied().map(gelu).collect();
        let gate = sigmoid(dot(&self.wg, &gate_act));
        let fused = fuse(v, t, gate)?;
        Ok(ForwardCache {
            head_pre,
            head_act,
            logits,
            joint,
            gate_pre,
            gate_act,
            gate,
            fused,
        })
    }
}

/// `g·v + (1 − g)·t`.
pub fn fuse(v: &[f64], t: &[f64], g: f64) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&g) {
        return Err(EmoError::InvalidGate(g));
    }
    check_dim(v.len(), t.len())?;
    Ok(v.iter().zip(t).map(|(a, b)| g * a + (1.0 - g) * b).collect())
}
