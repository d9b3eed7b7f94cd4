//! Composite-loss training of the fusion network and prototype bank.

mod adam;
mod loss;

use std::time::Instant;

use serde::{Deserialize, Serialize};

pub use adam::AdamConfig;
pub(crate) use adam::AdamState;
pub use loss::{
    assignments, composite_loss, composite_loss_with, gradients, gradients_with, loss_contrast,
    loss_diversity, loss_dist, loss_main, Gradients, LossComponents,
};

use crate::bank::{PrototypeBank, DEFAULT_MAX_SPLIT_FRACTION};
use crate::data::EmbeddingDataset;
use crate::error::{EmoError, Result};
use crate::fusion::{FusionConfig, FusionNet};
use crate::linalg::Mat;
use crate::rng::Rng;

/// One training example, borrowed from a dataset.
#[derive(Debug, Clone, Copy)]
pub struct Sample<'a> {
    pub visual: &'a [f64],
    pub text: &'a [f64],
    pub label: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub alpha_l: f64,
    pub beta_l: f64,
    pub gamma_l: f64,
    pub delta_l: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha_l: 1.0,
            beta_l: 0.5,
            gamma_l: 0.1,
            delta_l: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.alpha_l, self.beta_l, self.gamma_l, self.delta_l];
        if all.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(EmoError::InvalidConfig("loss weights must be finite and >= 0".into()));
        }
        if all.iter().all(|w| *w == 0.0) {
            return Err(EmoError::InvalidConfig("at least one loss weight must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub contrast_temperature: f64,
    pub distance_margin: f64,
    pub adapt_every: usize,
    pub warmup_epochs: usize,
    pub max_split_fraction: f64,
    pub seed: u64,
    /// Number of prototypes at initialization.
    pub prototypes: usize,
    pub merge_threshold: f64,
    pub split_threshold: f64,
    pub head_hidden: usize,
    pub gate_hidden: usize,
    pub adam: AdamConfig,
    /// Worker threads for per-sample gradients; results do not depend on it.
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 32,
            learning_rate: 1e-3,
            contrast_temperature: 0.07,
            distance_margin: 0.5,
            adapt_every: 5,
            warmup_epochs: 10,
            max_split_fraction: DEFAULT_MAX_SPLIT_FRACTION,
            seed: 42,
            prototypes: 16,
            merge_threshold: crate::bank::DEFAULT_MERGE_THRESHOLD,
            split_threshold: crate::bank::DEFAULT_SPLIT_THRESHOLD,
            head_hidden: FusionConfig::DESK.head_hidden,
            gate_hidden: FusionConfig::DESK.gate_hidden,
            adam: AdamConfig::default(),
            threads: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(EmoError::InvalidConfig(msg.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return bad("learning_rate must be finite and >= 0");
        }
        if !(self.contrast_temperature > 0.0) {
            return bad("contrast_temperature must be positive");
        }
        if !(self.distance_margin > 0.0) {
            return bad("distance_margin must be positive");
        }
        if self.adapt_every == 0 {
            return bad("adapt_every must be positive");
        }
        if !(self.max_split_fraction > 0.0 && self.max_split_fraction <= 1.0) {
            return bad("max_split_fraction must lie in (0, 1]");
        }
        if self.prototypes == 0 || self.head_hidden == 0 || self.gate_hidden == 0 {
            return bad("prototypes, head_hidden and gate_hidden must be positive");
        }
        if self.threads == 0 {
            return bad("threads must be positive");
        }
        Ok(())
    }

    fn adapts_after(&self, epoch: usize) -> bool {
        epoch > self.warmup_epochs && (epoch - self.warmup_epochs) % self.adapt_every == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: LossComponents,
    pub train_accuracy: f64,
    pub prototypes: usize,
    pub diversity: f64,
    pub total_usage: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptationRecord {
    pub epoch: usize,
    pub merged_groups: usize,
    pub split: usize,
    pub k_after: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub seed: u64,
    pub epochs: Vec<EpochRecord>,
    /// K after initialization followed by K after each adaptation pass.
    pub k_trajectory: Vec<usize>,
    pub adaptations: Vec<AdaptationRecord>,
    pub final_accuracy: f64,
    /// Excluded from equality-sensitive output; see [`TrainReport::deterministic_json`].
    pub wall_time_secs: f64,
}

impl TrainReport {
    /// JSON without the wall-clock field, for byte-stable artifacts.
    pub fn deterministic_json(&self) -> serde_json::Value {
        let mut v = serde_json::to_value(self).expect("report serializes");
        if let Some(obj) = v.as_object_mut() {
            obj.remove("wall_time_secs");
        }
        v
    }
}

#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub net: FusionNet,
    pub bank: PrototypeBank,
    pub report: TrainReport,
}

impl TrainedModel {
    /// Fused features of every dataset sample, the inputs a latent mapper is trained on.
    pub fn fused_features(&self, data: &EmbeddingDataset) -> Result<Vec<Vec<f64>>> {
        data.samples().map(|s| self.net.fused(s.visual, s.text)).collect()
    }
}

/// Fresh network and bank exactly as training would initialize them.
pub fn initialize(data: &EmbeddingDataset, cfg: &TrainConfig) -> Result<(FusionNet, PrototypeBank)> {
    cfg.validate()?;
    let fusion_cfg = FusionConfig {
        visual_dim: data.visual_dim(),
        text_dim: data.text_dim(),
        head_hidden: cfg.head_hidden,
        gate_hidden: cfg.gate_hidden,
        classes: data.classes(),
    };
    let mut rng = Rng::new(cfg.seed);
    let net = FusionNet::init(&fusion_cfg, &mut rng.fork())?;
    let bank = PrototypeBank::orthogonal(
        cfg.prototypes,
        data.visual_dim(),
        cfg.merge_threshold,
        cfg.split_threshold,
        &mut rng.fork(),
    )?;
    Ok((net, bank))
}

/// Fraction of samples whose argmax logit equals the label.
pub fn accuracy(net: &FusionNet, data: &EmbeddingDataset) -> Result<f64> {
    let mut correct = 0usize;
    for s in data.samples() {
        let logits = net.classify(s.visual)?;
        let pred = argmax(&logits);
        if pred == s.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

struct Optimizer {
    w1: AdamState,
    w2: AdamState,
    ug: AdamState,
    wg: AdamState,
    prototypes: AdamState,
}

impl Optimizer {
    fn new(net: &FusionNet, bank: &PrototypeBank) -> Self {
        let whole = |m: &Mat| AdamState::new(1, m.rows() * m.cols());
        Self {
            w1: whole(&net.w1),
            w2: whole(&net.w2),
            ug: whole(&net.ug),
            wg: AdamState::new(1, net.wg.len()),
            prototypes: AdamState::new(bank.len(), bank.dim()),
        }
    }

    fn step(&mut self, cfg: &TrainConfig, net: &mut FusionNet, bank: &mut PrototypeBank, g: &Gradients) -> Result<()> {
        let lr = cfg.learning_rate;
        self.w1.step(&cfg.adam, lr, net.w1.as_mut_slice(), g.w1.as_slice());
        self.w2.step(&cfg.adam, lr, net.w2.as_mut_slice(), g.w2.as_slice());
        self.ug.step(&cfg.adam, lr, net.ug.as_mut_slice(), g.ug.as_slice());
        self.wg.step(&cfg.adam, lr, &mut net.wg, &g.wg);
        self.prototypes
            .step(&cfg.adam, lr, bank.prototypes_mut().as_mut_slice(), g.prototypes.as_slice());
        bank.renormalize()
    }
}

/// Train the fusion network and prototype bank on `data`.
///
/// Each epoch shuffles the samples, runs mini-batch Adam steps with
/// assignments frozen per step, renormalizes prototypes after every step and
/// accumulates usage. After the warmup, every `adapt_every` epochs the bank is
/// merged and then split. The run is a deterministic function of `cfg.seed`.
pub fn train(data: &EmbeddingDataset, cfg: &TrainConfig, w: &LossWeights) -> Result<TrainedModel> {
    let start = Instant::now();
    if data.is_empty() {
        return Err(EmoError::EmptyDataset);
    }
    w.validate()?;
    data.validate()?;
    let (mut net, mut bank) = initialize(data, cfg)?;
    let mut rng = Rng::new(cfg.seed);
    // Skip the two streams consumed by initialization.
    let _ = (rng.fork(), rng.fork());
    let mut shuffle_rng = rng.fork();
    let mut split_rng = rng.fork();

    let mut opt = Optimizer::new(&net, &bank);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut report = TrainReport {
        seed: cfg.seed,
        epochs: Vec::with_capacity(cfg.epochs),
        k_trajectory: vec![bank.len()],
        adaptations: Vec::new(),
        final_accuracy: accuracy(&net, data)?,
        wall_time_secs: 0.0,
    };

    for epoch in 1..=cfg.epochs {
        shuffle_rng.shuffle(&mut order);
        let mut sums = LossComponents::default();
        let mut steps = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<Sample<'_>> = chunk.iter().map(|&i| data.sample(i)).collect();
            let assigned = assignments(&batch, &net, bank.prototypes())?;
            let (parts, grads) = gradients_with(&batch, &net, bank.prototypes(), &assigned, w, cfg)?;
            opt.step(cfg, &mut net, &mut bank, &grads)?;
            bank.update_usage(&assigned)?;

            let n = batch.len() as f64;
            sums.main += parts.main * n;
            sums.contrast += parts.contrast * n;
            sums.diversity += parts.diversity;
            sums.distance += parts.distance;
            steps += 1;
        }
        let total = data.len() as f64;
        let mut loss = LossComponents {
            main: sums.main / total,
            contrast: sums.contrast / total,
            diversity: sums.diversity / steps as f64,
            distance: sums.distance / steps as f64,
            total: 0.0,
        };
        loss.total = w.alpha_l * loss.main
            + w.beta_l * loss.contrast
            + w.gamma_l * loss.diversity
            + w.delta_l * loss.distance;

        if cfg.adapts_after(epoch) {
            let merge = bank.merge_step();
            let mut sources: Vec<Option<usize>> = merge
                .sources
                .iter()
                .map(|s| if s.len() == 1 { Some(s[0]) } else { None })
                .collect();
            let split = bank.split_step(&mut split_rng, cfg.max_split_fraction)?;
            for &i in &split.split_indices {
                sources[i] = None;
            }
            sources.resize(bank.len(), None);
            opt.prototypes.remap_rows(&sources);
            report.k_trajectory.push(bank.len());
            report.adaptations.push(AdaptationRecord {
                epoch,
                merged_groups: merge.merged_groups.len(),
                split: split.split_indices.len(),
                k_after: bank.len(),
            });
        }

        report.epochs.push(EpochRecord {
            epoch,
            loss,
            train_accuracy: accuracy(&net, data)?,
            prototypes: bank.len(),
            diversity: loss_diversity(bank.prototypes()),
            total_usage: bank.total_usage(),
        });
    }

    report.final_accuracy = report
        .epochs
        .last()
        .map_or(report.final_accuracy, |e| e.train_accuracy);
    report.wall_time_secs = start.elapsed().as_secs_f64();
    Ok(TrainedModel { net, bank, report })
}
