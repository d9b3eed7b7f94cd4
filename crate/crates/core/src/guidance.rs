//! Emotion-conditioned guidance: scaled dot-product attention, top-k
//! prototype guidance, temporal blending and per-head attention reweighting.

use serde::{Deserialize, Serialize};

use crate::bank::PrototypeBank;
use crate::error::{check_dim, EmoError, Result};
use crate::linalg::{cosine_sim, dot, norm, normalize, softmax, Mat};
use crate::rng::Rng;

pub const DEFAULT_TAU_TEMP: f64 = 0.1;
pub const DEFAULT_ALPHA_ATTN: f64 = 1.5;
pub const DEFAULT_NEG_SCALE: f64 = 0.3;
pub const DEFAULT_HEADS: usize = 8;
/// Standard deviation of the head projection at initialization.
pub const WP_INIT_STD: f64 = 0.02;

/// Dense `(B, H, T, D)` tensor, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor4 {
    shape: [usize; 4],
    data: Vec<f64>,
}

impl Tensor4 {
    pub fn zeros(shape: [usize; 4]) -> Self {
        Self {
            shape,
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: [usize; 4], data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.iter().product::<usize>() {
            return Err(EmoError::ShapeMismatch(format!(
                "{} values for shape {shape:?}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn random(shape: [usize; 4], rng: &mut Rng) -> Self {
        let data = (0..shape.iter().product()).map(|_| rng.normal()).collect();
        Self { shape, data }
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// The last-axis row at `(b, h, t)`.
    pub fn row(&self, b: usize, h: usize, t: usize) -> &[f64] {
        let d = self.shape[3];
        let start = ((b * self.shape[1] + h) * self.shape[2] + t) * d;
        &self.data[start..start + d]
    }

    pub fn row_mut(&mut self, b: usize, h: usize, t: usize) -> &mut [f64] {
        let d = self.shape[3];
        let start = ((b * self.shape[1] + h) * self.shape[2] + t) * d;
        &mut self.data[start..start + d]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionInputs {
    pub q: Tensor4,
    pub k: Tensor4,
    pub v: Tensor4,
}

/// `softmax(QKᵀ/√d_k)·V` per batch and head. Returns `(output, weights)`.
pub fn attention(inputs: &AttentionInputs) -> Result<(Tensor4, Tensor4)> {
    let [b, h, tq, dk] = inputs.q.shape();
    let [kb, kh, tk, kdk] = inputs.k.shape();
    let [vb, vh, vt, dv] = inputs.v.shape();
    if dk == 0 || (kb, kh, kdk) != (b, h, dk) || (vb, vh, vt) != (b, h, tk) || tk == 0 {
        return Err(EmoError::ShapeMismatch(format!(
            "Q {:?}, K {:?}, V {:?}",
            inputs.q.shape(),
            inputs.k.shape(),
            inputs.v.shape()
        )));
    }
    let scale = 1.0 / (dk as f64).sqrt();
    let mut weights = Tensor4::zeros([b, h, tq, tk]);
    let mut output = Tensor4::zeros([b, h, tq, dv]);
    for bi in 0..b {
        for hi in 0..h {
            for qi in 0..tq {
                let q = inputs.q.row(bi, hi, qi);
                let scores: Vec<f64> = (0..tk)
                    .map(|ki| dot(q, inputs.k.row(bi, hi, ki)) * scale)
                    .collect();
                let w = softmax(&scores, 1.0)?;
                let out = output.row_mut(bi, hi, qi);
                for (ki, &wk) in w.iter().enumerate() {
                    for (o, &x) in out.iter_mut().zip(inputs.v.row(bi, hi, ki)) {
                        *o += wk * x;
                    }
                }
                weights.row_mut(bi, hi, qi).copy_from_slice(&w);
            }
        }
    }
    Ok((output, weights))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuidanceConfig {
    pub k_pos: usize,
    pub k_neg: usize,
    pub tau_temp: f64,
    pub alpha_attn: f64,
    /// `H × d_p` head projection.
    pub wp: Mat,
    pub renormalize_rows: bool,
    pub neg_scale: f64,
}

impl GuidanceConfig {
    /// Defaults with a freshly initialized head projection.
    pub fn new(dim: usize, heads: usize, rng: &mut Rng) -> Self {
        Self {
            k_pos: 4,
            k_neg: 0,
            tau_temp: DEFAULT_TAU_TEMP,
            alpha_attn: DEFAULT_ALPHA_ATTN,
            wp: Mat::gaussian(heads, dim, WP_INIT_STD, rng),
            renormalize_rows: false,
            neg_scale: DEFAULT_NEG_SCALE,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k_pos == 0 {
            return Err(EmoError::InvalidConfig("k_pos must be at least 1".into()));
        }
        if !(self.tau_temp > 0.0) {
            return Err(EmoError::InvalidTemperature(self.tau_temp));
        }
        if !self.alpha_attn.is_finite() || !self.neg_scale.is_finite() || !self.wp.is_finite() {
            return Err(EmoError::InvalidConfig("non-finite guidance parameter".into()));
        }
        Ok(())
    }

    pub fn heads(&self) -> usize {
        self.wp.rows()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuidanceResult {
    pub p_emo: Vec<f64>,
    /// Selected prototypes, highest similarity first.
    pub indices: Vec<usize>,
    pub weights: Vec<f64>,
    /// Raw inner products of the query with the selected prototypes.
    pub scores: Vec<f64>,
    pub p_neg: Option<Vec<f64>>,
    pub neg_indices: Vec<usize>,
    pub neg_weights: Vec<f64>,
}

impl GuidanceResult {
    /// `normalize(p_emo − λ_neg·p_neg)`, or `normalize(p_emo)` without negatives.
    pub fn effective(&self, neg_scale: f64) -> Result<Vec<f64>> {
        match &self.p_neg {
            Some(neg) => {
                let combined: Vec<f64> = self
                    .p_emo
                    .iter()
                    .zip(neg)
                    .map(|(p, n)| p - neg_scale * n)
                    .collect();
                normalize(&combined)
            }
            None => normalize(&self.p_emo),
        }
    }
}

/// Softmax-weighted combination of the `k_pos` prototypes with the largest
/// inner product with `e`; optionally the `k_neg` smallest as negatives.
pub fn multi_prototype_guidance(
    e: &[f64],
    bank: &PrototypeBank,
    cfg: &GuidanceConfig,
) -> Result<GuidanceResult> {
    check_dim(bank.dim(), e.len())?;
    if norm(e) == 0.0 {
        return Err(EmoError::ZeroVector);
    }
    cfg.validate()?;
    let k = bank.len();
    if cfg.k_pos > k {
        return Err(EmoError::KTooLarge { k: cfg.k_pos, size: k });
    }
    if cfg.k_neg > k {
        return Err(EmoError::KTooLarge { k: cfg.k_neg, size: k });
    }
    let scores: Vec<f64> = bank.prototypes().row_iter().map(|p| dot(e, p)).collect();

    let mut ranked: Vec<usize> = (0..k).collect();
    ranked.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let indices: Vec<usize> = ranked[..cfg.k_pos].to_vec();
    let selected: Vec<f64> = indices.iter().map(|&i| scores[i]).collect();
    let weights = softmax(&selected, cfg.tau_temp)?;
    let p_emo = combine(bank, &indices, &weights);

    let (p_neg, neg_indices, neg_weights) = if cfg.k_neg > 0 {
        let mut ascending: Vec<usize> = (0..k).collect();
        ascending.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
        let neg: Vec<usize> = ascending[..cfg.k_neg].to_vec();
        let negated: Vec<f64> = neg.iter().map(|&i| -scores[i]).collect();
        let w = softmax(&negated, cfg.tau_temp)?;
        (Some(combine(bank, &neg, &w)), neg, w)
    } else {
        (None, Vec::new(), Vec::new())
    };

    Ok(GuidanceResult {
        p_emo,
        indices,
        weights,
        scores: selected,
        p_neg,
        neg_indices,
        neg_weights,
    })
}

fn combine(bank: &PrototypeBank, indices: &[usize], weights: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; bank.dim()];
    for (&i, &w) in indices.iter().zip(weights) {
        for (o, &p) in out.iter_mut().zip(bank.prototype(i)) {
            *o += w * p;
        }
    }
    out
}

/// Three-phase schedule over `total_steps`: hold the content embedding until
/// `ramp_start`, ramp linearly to the emotion embedding by `ramp_end`, then hold.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BlendSchedule {
    pub total_steps: usize,
    pub ramp_start: f64,
    pub ramp_end: f64,
}

impl Default for BlendSchedule {
    fn default() -> Self {
        Self {
            total_steps: 50,
            ramp_start: 0.2,
            ramp_end: 0.6,
        }
    }
}

impl BlendSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.total_steps == 0 {
            return Err(EmoError::InvalidConfig("total_steps must be at least 1".into()));
        }
        let in_unit = |x: f64| (0.0..=1.0).contains(&x);
        if !in_unit(self.ramp_start) || !in_unit(self.ramp_end) || self.ramp_start > self.ramp_end {
            return Err(EmoError::InvalidConfig(format!(
                "ramp boundaries must satisfy 0 <= {} <= {} <= 1",
                self.ramp_start, self.ramp_end
            )));
        }
        Ok(())
    }

    /// Normalized progress of `step` in `[0, 1]`.
    pub fn progress(&self, step: usize) -> f64 {
        if self.total_steps == 1 {
            1.0
        } else {
            step as f64 / (self.total_steps - 1) as f64
        }
    }

    /// Emotion weight at `step`.
    pub fn weight(&self, step: usize) -> f64 {
        let rho = self.progress(step);
        if rho < self.ramp_start {
            0.0
        } else if rho > self.ramp_end {
            1.0
        } else if self.ramp_end > self.ramp_start {
            (rho - self.ramp_start) / (self.ramp_end - self.ramp_start)
        } else {
            1.0
        }
    }
}

/// Blended conditioning vector `normalize((1−w)·ĉ + w·ê)` at `step`.
pub fn blend(step: usize, schedule: &BlendSchedule, p_content: &[f64], p_emo: &[f64]) -> Result<Vec<f64>> {
    schedule.validate()?;
    if step >= schedule.total_steps {
        return Err(EmoError::IndexOutOfRange {
            index: step,
            len: schedule.total_steps,
        });
    }
    check_dim(p_content.len(), p_emo.len())?;
    let c = normalize(p_content)?;
    let e = normalize(p_emo)?;
    let w = schedule.weight(step);
    let mixed: Vec<f64> = c.iter().zip(&e).map(|(a, b)| (1.0 - w) * a + w * b).collect();
    if norm(&mixed) < 1e-9 {
        return Err(EmoError::DegenerateBlend);
    }
    normalize(&mixed)
}

/// Per-head multiplier `1 + α·tanh(W_p·p_t)`.
pub fn head_factors(p_t: &[f64], cfg: &GuidanceConfig) -> Result<Vec<f64>> {
    let bias = cfg.wp.matvec(p_t)?;
    Ok(bias.into_iter().map(|b| 1.0 + cfg.alpha_attn * b.tanh()).collect())
}

/// Scale each head's attention weights by its factor; optionally renormalize rows.
pub fn reweight_attention(weights: &Tensor4, p_t: &[f64], cfg: &GuidanceConfig) -> Result<Tensor4> {
    let [b, h, tq, _] = weights.shape();
    if cfg.heads() != h {
        return Err(EmoError::ShapeMismatch(format!(
            "projection has {} heads, attention has {h}",
            cfg.heads()
        )));
    }
    if cfg.wp.cols() != p_t.len() {
        return Err(EmoError::ShapeMismatch(format!(
            "projection expects dimension {}, got {}",
            cfg.wp.cols(),
            p_t.len()
        )));
    }
    let factors = head_factors(p_t, cfg)?;
    let mut out = weights.clone();
    for bi in 0..b {
        for (hi, &factor) in factors.iter().enumerate() {
            for qi in 0..tq {
                let row = out.row_mut(bi, hi, qi);
                row.iter_mut().for_each(|x| *x *= factor);
                if cfg.renormalize_rows {
                    let sum: f64 = row.iter().sum();
                    if !(sum > 0.0) {
                        return Err(EmoError::NonPositiveRow {
                            batch: bi,
                            head: hi,
                            query: qi,
                        });
                    }
                    row.iter_mut().for_each(|x| *x /= sum);
                }
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub step: usize,
    pub blend_weight: f64,
    pub head_factors: Vec<f64>,
    /// Cosine between the blended vector and the blend target.
    pub cosine_to_target: f64,
    pub cosine_to_emo: f64,
    /// Sum of each head's reweighted attention, averaged over batch and queries.
    pub head_mass: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuidanceTrace {
    pub guidance: GuidanceResult,
    /// Vector the schedule blends towards (`p_emo`, or its negative-adjusted form).
    pub target: Vec<f64>,
    pub steps: Vec<TraceStep>,
}

/// Run the blending schedule against a fixed attention fixture.
pub fn guidance_trace(
    p_content: &[f64],
    e: &[f64],
    bank: &PrototypeBank,
    cfg: &GuidanceConfig,
    schedule: &BlendSchedule,
    fixture: &Tensor4,
) -> Result<GuidanceTrace> {
    schedule.validate()?;
    let guidance = multi_prototype_guidance(e, bank, cfg)?;
    let target = guidance.effective(cfg.neg_scale)?;
    let [b, h, tq, _] = fixture.shape();
    let mut steps = Vec::with_capacity(schedule.total_steps);
    for step in 0..schedule.total_steps {
        let p_t = blend(step, schedule, p_content, &target)?;
        let reweighted = reweight_attention(fixture, &p_t, cfg)?;
        let mut head_mass = vec![0.0; h];
        for (hi, mass) in head_mass.iter_mut().enumerate() {
            for bi in 0..b {
                for qi in 0..tq {
                    *mass += reweighted.row(bi, hi, qi).iter().sum::<f64>();
                }
            }
            *mass /= (b * tq).max(1) as f64;
        }
        steps.push(TraceStep {
            step,
            blend_weight: schedule.weight(step),
            head_factors: head_factors(&p_t, cfg)?,
            cosine_to_target: cosine_sim(&p_t, &target)?,
            cosine_to_emo: cosine_sim(&p_t, &guidance.p_emo)?,
            head_mass,
        });
    }
    Ok(GuidanceTrace {
        guidance,
        target,
        steps,
    })
}

/// Uniform attention weights of the given shape, used as a default trace fixture.
pub fn uniform_attention(shape: [usize; 4]) -> Tensor4 {
    let tk = shape[3].max(1);
    Tensor4 {
        shape,
        data: vec![1.0 / tk as f64; shape.iter().product()],
    }
}
