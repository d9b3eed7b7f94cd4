//! Composite training objective and its reverse-mode gradient.
//!
//! ```text
//! L = α·mean(CE) + β·mean(InfoNCE over prototypes) + γ·mean_{i<j} cos²(p_i, p_j)
//!     + δ·mean_{i<j} max(0, margin − ‖p_i − p_j‖)²
//! ```
//!
//! Prototype assignments are constants inside a step. All cosines involving
//! prototypes use the full `a·b/(‖a‖‖b‖)` form so the gradient stays exact
//! when rows drift off the unit sphere between renormalizations.

use serde::{Deserialize, Serialize};

use crate::bank::PrototypeBank;
use crate::error::{EmoError, Result};
use crate::fusion::FusionNet;
use crate::linalg::{add_cosine_grad, cosine_sim, gelu_grad, log_sum_exp, norm, softmax, Mat};

use super::{LossWeights, Sample, TrainConfig};

/// `−log softmax(logits)[label]`.
pub fn loss_main(logits: &[f64], label: usize) -> Result<f64> {
    if label >= logits.len() {
        return Err(EmoError::IndexOutOfRange {
            index: label,
            len: logits.len(),
        });
    }
    Ok((log_sum_exp(logits) - logits[label]).max(0.0))
}

/// InfoNCE of the fused feature against every prototype, positive = `assigned`.
pub fn loss_contrast(f: &[f64], prototypes: &Mat, assigned: usize, temperature: f64) -> Result<f64> {
    if assigned >= prototypes.rows() {
        return Err(EmoError::IndexOutOfRange {
            index: assigned,
            len: prototypes.rows(),
        });
    }
    if norm(f) == 0.0 {
        return Err(EmoError::ZeroVector);
    }
    if !(temperature > 0.0) {
        return Err(EmoError::InvalidTemperature(temperature));
    }
    let scaled = prototypes
        .row_iter()
        .map(|p| cosine_sim(f, p).map(|c| c / temperature))
        .collect::<Result<Vec<f64>>>()?;
    Ok((log_sum_exp(&scaled) - scaled[assigned]).max(0.0))
}

/// Mean squared pairwise cosine between prototypes.
pub fn loss_diversity(prototypes: &Mat) -> f64 {
    mean_over_pairs(prototypes, |a, b| {
        let c = cosine_sim(a, b).unwrap_or(0.0);
        c * c
    })
}

/// Mean squared hinge on pairwise Euclidean distance.
pub fn loss_dist(prototypes: &Mat, margin: f64) -> f64 {
    mean_over_pairs(prototypes, |a, b| {
        let d = euclidean(a, b);
        let gap = (margin - d).max(0.0);
        gap * gap
    })
}

fn mean_over_pairs(m: &Mat, term: impl Fn(&[f64], &[f64]) -> f64) -> f64 {
    let k = m.rows();
    if k < 2 {
        return 0.0;
    }
    let mut total = 0.0;
    for i in 0..k {
        for j in i + 1..k {
            total += term(m.row(i), m.row(j));
        }
    }
    total / pair_count(k)
}

fn pair_count(k: usize) -> f64 {
    (k * (k - 1) / 2) as f64
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub main: f64,
    pub contrast: f64,
    pub diversity: f64,
    pub distance: f64,
    pub total: f64,
}

/// Gradient of the composite loss, one block per parameter group.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub w1: Mat,
    pub w2: Mat,
    pub ug: Mat,
    pub wg: Vec<f64>,
    pub prototypes: Mat,
}

impl Gradients {
    pub fn zeros_like(net: &FusionNet, prototypes: &Mat) -> Self {
        Self {
            w1: Mat::zeros(net.w1.rows(), net.w1.cols()),
            w2: Mat::zeros(net.w2.rows(), net.w2.cols()),
            ug: Mat::zeros(net.ug.rows(), net.ug.cols()),
            wg: vec![0.0; net.wg.len()],
            prototypes: Mat::zeros(prototypes.rows(), prototypes.cols()),
        }
    }

    fn add(&mut self, other: &Gradients) {
        fn acc(a: &mut [f64], b: &[f64]) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
        acc(self.w1.as_mut_slice(), other.w1.as_slice());
        acc(self.w2.as_mut_slice(), other.w2.as_slice());
        acc(self.ug.as_mut_slice(), other.ug.as_slice());
        acc(&mut self.wg, &other.wg);
        acc(self.prototypes.as_mut_slice(), other.prototypes.as_slice());
    }

    pub fn max_abs(&self) -> f64 {
        [
            self.w1.as_slice(),
            self.w2.as_slice(),
            self.ug.as_slice(),
            &self.wg,
            self.prototypes.as_slice(),
        ]
        .iter()
        .flat_map(|s| s.iter())
        .fold(0.0f64, |m, x| m.max(x.abs()))
    }
}

/// Per-sample forward and backward result.
struct SampleTerms {
    main: f64,
    contrast: f64,
    grads: Option<Gradients>,
}

/// Assignment of each sample's fused feature to its nearest prototype.
pub fn assignments(batch: &[Sample<'_>], net: &FusionNet, prototypes: &Mat) -> Result<Vec<usize>> {
    batch
        .iter()
        .map(|s| {
            let f = net.fused(s.visual, s.text)?;
            nearest(&f, prototypes)
        })
        .collect()
}

fn nearest(f: &[f64], prototypes: &Mat) -> Result<usize> {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, p) in prototypes.row_iter().enumerate() {
        let c = cosine_sim(f, p)?;
        if c > best.1 {
            best = (i, c);
        }
    }
    Ok(best.0)
}

fn validate_batch(batch: &[Sample<'_>], net: &FusionNet, prototypes: &Mat) -> Result<()> {
    if batch.is_empty() {
        return Err(EmoError::EmptyInput);
    }
    if prototypes.rows() == 0 {
        return Err(EmoError::InvariantViolation("empty prototype bank".into()));
    }
    let m = net.classes();
    for s in batch {
        if s.label >= m {
            return Err(EmoError::IndexOutOfRange { index: s.label, len: m });
        }
    }
    Ok(())
}

fn sample_terms(
    sample: &Sample<'_>,
    assigned: usize,
    net: &FusionNet,
    prototypes: &Mat,
    w: &LossWeights,
    cfg: &TrainConfig,
    batch_len: usize,
    want_grad: bool,
) -> Result<SampleTerms> {
    let fw = net.forward(sample.visual, sample.text)?;
    let main = loss_main(&fw.logits, sample.label)?;
    let contrast = loss_contrast(&fw.fused, prototypes, assigned, cfg.contrast_temperature)?;
    if !want_grad {
        return Ok(SampleTerms {
            main,
            contrast,
            grads: None,
        });
    }

    let mut g = Gradients::zeros_like(net, prototypes);
    let inv_b = 1.0 / batch_len as f64;

    // Categorical head.
    if w.alpha_l != 0.0 {
        let mut d_logits = softmax(&fw.logits, 1.0)?;
        d_logits[sample.label] -= 1.0;
        d_logits.iter_mut().for_each(|x| *x *= w.alpha_l * inv_b);
        g.w2.add_outer(1.0, &fw.head_act, &d_logits);
        let d_act = net.w2.matvec(&d_logits)?;
        let d_pre: Vec<f64> = d_act
            .iter()
            .zip(&fw.head_pre)
            .map(|(d, &x)| d * gelu_grad(x))
            .collect();
        g.w1.add_outer(1.0, sample.visual, &d_pre);
    }

    // Contrast term through the fused feature and the prototypes.
    if w.beta_l != 0.0 {
        let tau = cfg.contrast_temperature;
        let cos: Vec<f64> = prototypes
            .row_iter()
            .map(|p| cosine_sim(&fw.fused, p))
            .collect::<Result<_>>()?;
        let mut d_scores = softmax(&cos, tau)?;
        d_scores[assigned] -= 1.0;
        let scale = w.beta_l * inv_b / tau;
        let mut d_fused = vec![0.0; fw.fused.len()];
        for (i, &ds) in d_scores.iter().enumerate() {
            let coeff = scale * ds;
            if coeff == 0.0 {
                continue;
            }
            let p = prototypes.row(i);
            add_cosine_grad(&fw.fused, p, coeff, &mut d_fused);
            add_cosine_grad(p, &fw.fused, coeff, g.prototypes.row_mut(i));
        }
        // f = g·v + (1−g)·t  ⇒  ∂f/∂g = v − t.
        let d_gate: f64 = d_fused
            .iter()
            .zip(sample.visual.iter().zip(sample.text))
            .map(|(df, (v, t))| df * (v - t))
            .sum();
        let d_z = d_gate * fw.gate * (1.0 - fw.gate);
        for (gw, &a) in g.wg.iter_mut().zip(&fw.gate_act) {
            *gw += d_z * a;
        }
        let d_pre: Vec<f64> = net
            .wg
            .iter()
            .zip(&fw.gate_pre)
            .map(|(&wgi, &x)| d_z * wgi * gelu_grad(x))
            .collect();
        g.ug.add_outer(1.0, &d_pre, &fw.joint);
    }

    Ok(SampleTerms {
        main,
        contrast,
        grads: Some(g),
    })
}

fn add_bank_gradients(prototypes: &Mat, w: &LossWeights, margin: f64, out: &mut Mat) {
    let k = prototypes.rows();
    if k < 2 {
        return;
    }
    let pairs = pair_count(k);
    for i in 0..k {
        for j in i + 1..k {
            let (pi, pj) = (prototypes.row(i), prototypes.row(j));
            if w.gamma_l != 0.0 {
                let c = cosine_sim(pi, pj).unwrap_or(0.0);
                let coeff = w.gamma_l * 2.0 * c / pairs;
                add_cosine_grad(pi, pj, coeff, out.row_mut(i));
                add_cosine_grad(pj, pi, coeff, out.row_mut(j));
            }
            if w.delta_l != 0.0 {
                let d = euclidean(pi, pj);
                if d < margin && d > 0.0 {
                    let coeff = -w.delta_l * 2.0 * (margin - d) / (d * pairs);
                    let diff: Vec<f64> = pi.iter().zip(pj).map(|(a, b)| a - b).collect();
                    for (o, x) in out.row_mut(i).iter_mut().zip(&diff) {
                        *o += coeff * x;
                    }
                    for (o, x) in out.row_mut(j).iter_mut().zip(&diff) {
                        *o -= coeff * x;
                    }
                }
            }
        }
    }
}

fn combine(main: f64, contrast: f64, prototypes: &Mat, w: &LossWeights, margin: f64) -> LossComponents {
    let diversity = loss_diversity(prototypes);
    let distance = loss_dist(prototypes, margin);
    LossComponents {
        main,
        contrast,
        diversity,
        distance,
        total: w.alpha_l * main + w.beta_l * contrast + w.gamma_l * diversity + w.delta_l * distance,
    }
}

/// Composite loss for raw parameters. `frozen` pins the prototype
/// assignments; when `None` they are recomputed from the current parameters.
pub fn composite_loss_with(
    batch: &[Sample<'_>],
    net: &FusionNet,
    prototypes: &Mat,
    frozen: Option<&[usize]>,
    w: &LossWeights,
    cfg: &TrainConfig,
) -> Result<LossComponents> {
    validate_batch(batch, net, prototypes)?;
    let assigned = match frozen {
        Some(a) => a.to_vec(),
        None => assignments(batch, net, prototypes)?,
    };
    let (mut main, mut contrast) = (0.0, 0.0);
    for (s, &a) in batch.iter().zip(&assigned) {
        let t = sample_terms(s, a, net, prototypes, w, cfg, batch.len(), false)?;
        main += t.main;
        contrast += t.contrast;
    }
    let b = batch.len() as f64;
    Ok(combine(main / b, contrast / b, prototypes, w, cfg.distance_margin))
}

pub fn composite_loss(
    batch: &[Sample<'_>],
    net: &FusionNet,
    bank: &PrototypeBank,
    w: &LossWeights,
    cfg: &TrainConfig,
) -> Result<LossComponents> {
    composite_loss_with(batch, net, bank.prototypes(), None, w, cfg)
}

/// Analytic gradient of the composite loss for raw parameters and fixed assignments.
///
/// Per-sample contributions are reduced in batch order regardless of
/// `threads`, so the result is bit-identical for any thread count.
pub fn gradients_with(
    batch: &[Sample<'_>],
    net: &FusionNet,
    prototypes: &Mat,
    assigned: &[usize],
    w: &LossWeights,
    cfg: &TrainConfig,
) -> Result<(LossComponents, Gradients)> {
    validate_batch(batch, net, prototypes)?;
    if assigned.len() != batch.len() {
        return Err(EmoError::DimMismatch {
            expected: batch.len(),
            got: assigned.len(),
        });
    }
    let one = |(s, &a): (&Sample<'_>, &usize)| {
        sample_terms(s, a, net, prototypes, w, cfg, batch.len(), true)
    };
    let per_sample: Vec<SampleTerms> = if cfg.threads > 1 {
        use rayon::prelude::*;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.threads)
            .build()
            .map_err(|e| EmoError::InvalidConfig(e.to_string()))?;
        pool.install(|| {
            batch
                .par_iter()
                .zip(assigned.par_iter())
                .map(one)
                .collect::<Result<Vec<_>>>()
        })?
    } else {
        batch.iter().zip(assigned).map(one).collect::<Result<Vec<_>>>()?
    };

    let mut grads = Gradients::zeros_like(net, prototypes);
    let (mut main, mut contrast) = (0.0, 0.0);
    for t in &per_sample {
        main += t.main;
        contrast += t.contrast;
        grads.add(t.grads.as_ref().expect("gradient requested"));
    }
    add_bank_gradients(prototypes, w, cfg.distance_margin, &mut grads.prototypes);
    let b = batch.len() as f64;
    Ok((combine(main / b, contrast / b, prototypes, w, cfg.distance_margin), grads))
}

/// Gradient of [`composite_loss`] with assignments taken from the current parameters.
pub fn gradients(
    batch: &[Sample<'_>],
    net: &FusionNet,
    bank: &PrototypeBank,
    w: &LossWeights,
    cfg: &TrainConfig,
) -> Result<(LossComponents, Gradients)> {
    validate_batch(batch, net, bank.prototypes())?;
    let assigned = assignments(batch, net, bank.prototypes())?;
    gradients_with(batch, net, bank.prototypes(), &assigned, w, cfg)
}
