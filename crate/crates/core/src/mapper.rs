//! Two-layer GELU MLP that maps representation embeddings into a generator's
//! conditioning space, trained with a cosine-plus-Euclidean objective.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, EmoError, Result};
use crate::linalg::{add_cosine_grad, cosine_sim, dot, gelu, gelu_grad, norm, Mat};
use crate::rng::Rng;
use crate::training::{AdamState, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mapper {
    /// `hidden × d_in`
    pub w_in: Mat,
    pub b_in: Vec<f64>,
    /// `d_out × hidden`
    pub w_out: Mat,
    pub b_out: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MapperLossWeights {
    pub lambda_cos: f64,
    pub lambda_euc: f64,
}

impl Default for MapperLossWeights {
    fn default() -> Self {
        Self {
            lambda_cos: 1.0,
            lambda_euc: 0.1,
        }
    }
}

impl MapperLossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_cos >= 0.0 && self.lambda_euc >= 0.0) || self.lambda_cos + self.lambda_euc <= 0.0 {
            return Err(EmoError::InvalidConfig(
                "mapper loss weights must be >= 0 with a positive sum".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapperReport {
    pub seed: u64,
    pub epoch_losses: Vec<f64>,
    pub wall_time_secs: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MapperGradients {
    pub w_in: Mat,
    pub b_in: Vec<f64>,
    pub w_out: Mat,
    pub b_out: Vec<f64>,
}

impl Mapper {
    /// Hidden width equals `d_in`; weights ~ N(0, 1/fan_in), biases zero.
    pub fn init(d_in: usize, d_out: usize, rng: &mut Rng) -> Result<Self> {
        Self::init_with_hidden(d_in, d_in, d_out, rng)
    }

    pub fn init_with_hidden(d_in: usize, hidden: usize, d_out: usize, rng: &mut Rng) -> Result<Self> {
        if d_in == 0 || hidden == 0 || d_out == 0 {
            return Err(EmoError::InvalidConfig("mapper dimensions must be positive".into()));
        }
        Ok(Self {
            w_in: Mat::gaussian(hidden, d_in, (d_in as f64).powf(-0.5), rng),
            b_in: vec![0.0; hidden],
            w_out: Mat::gaussian(d_out, hidden, (hidden as f64).powf(-0.5), rng),
            b_out: vec![0.0; d_out],
        })
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.b_in.len() == self.w_in.rows()
            && self.w_out.cols() == self.w_in.rows()
            && self.b_out.len() == self.w_out.rows();
        if !ok {
            return Err(EmoError::InvariantViolation("inconsistent mapper shapes".into()));
        }
        let finite = self.w_in.is_finite()
            && self.w_out.is_finite()
            && self.b_in.iter().chain(&self.b_out).all(|x| x.is_finite());
        if !finite {
            return Err(EmoError::InvariantViolation("non-finite mapper parameter".into()));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.w_in.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.w_out.rows()
    }

    pub fn map(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward(x)?.2)
    }

    fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
        check_dim(self.input_dim(), x.len())?;
        let pre: Vec<f64> = self
            .w_in
            .matvec(x)?
            .into_iter()
            .zip(&self.b_in)
            .map(|(a, b)| a + b)
            .collect();
        let act: Vec<f64> = pre.iter().copied().map(gelu).collect();
        let out: Vec<f64> = self
            .w_out
            .matvec(&act)?
            .into_iter()
            .zip(&self.b_out)
            .map(|(a, b)| a + b)
            .collect();
        Ok((pre, act, out))
    }

    /// Mean loss over `pairs` and its gradient.
    pub fn loss_and_gradients(
        &self,
        pairs: &[(&[f64], &[f64])],
        w: &MapperLossWeights,
    ) -> Result<(f64, MapperGradients)> {
        let mut g = MapperGradients {
            w_in: Mat::zeros(self.w_in.rows(), self.w_in.cols()),
            b_in: vec![0.0; self.b_in.len()],
            w_out: Mat::zeros(self.w_out.rows(), self.w_out.cols()),
            b_out: vec![0.0; self.b_out.len()],
        };
        if pairs.is_empty() {
            return Err(EmoError::EmptyDataset);
        }
        let inv_n = 1.0 / pairs.len() as f64;
        let mut total = 0.0;
        for &(x, y) in pairs {
            check_dim(self.output_dim(), y.len())?;
            let (pre, act, pred) = self.forward(x)?;
            total += mapper_loss(&pred, y, w);

            let mut d_pred: Vec<f64> = pred
                .iter()
                .zip(y)
                .map(|(p, t)| w.lambda_euc * 2.0 * (p - t) * inv_n)
                .collect();
            if norm(&pred) > 0.0 && norm(y) > 0.0 {
                add_cosine_grad(&pred, y, -w.lambda_cos * inv_n, &mut d_pred);
            }
            for (gb, d) in g.b_out.iter_mut().zip(&d_pred) {
                *gb += d;
            }
            g.w_out.add_outer(1.0, &d_pred, &act);
            let d_act = self.w_out.t_matvec(&d_pred)?;
            let d_pre: Vec<f64> = d_act
                .iter()
                .zip(&pre)
                .map(|(d, &z)| d * gelu_grad(z))
                .collect();
            for (gb, d) in g.b_in.iter_mut().zip(&d_pre) {
                *gb += d;
            }
            g.w_in.add_outer(1.0, &d_pre, x);
        }
        Ok((total * inv_n, g))
    }
}

/// `λ_cos·(1 − cos(pred, target)) + λ_euc·‖pred − target‖²`; a zero `pred`
/// (or target) takes the maximal cosine term 1.
pub fn mapper_loss(pred: &[f64], target: &[f64], w: &MapperLossWeights) -> f64 {
    let cos_term = match cosine_sim(pred, target) {
        Ok(c) => 1.0 - c,
        Err(_) => 1.0,
    };
    let sq: f64 = pred.iter().zip(target).map(|(p, t)| (p - t) * (p - t)).sum();
    w.lambda_cos * cos_term + w.lambda_euc * sq
}

/// Adam on the mean mapper loss. Uses `epochs`, `batch_size`,
/// `learning_rate`, `seed` and `adam` from `cfg`.
pub fn train_mapper(
    pairs: &[(Vec<f64>, Vec<f64>)],
    cfg: &TrainConfig,
    w: &MapperLossWeights,
) -> Result<(Mapper, MapperReport)> {
    let start = Instant::now();
    if pairs.is_empty() {
        return Err(EmoError::EmptyDataset);
    }
    w.validate()?;
    cfg.validate()?;
    let (d_in, d_out) = (pairs[0].0.len(), pairs[0].1.len());
    for (x, y) in pairs {
        check_dim(d_in, x.len())?;
        check_dim(d_out, y.len())?;
    }
    let mut rng = Rng::new(cfg.seed);
    let mut mapper = Mapper::init(d_in, d_out, &mut rng.fork())?;
    let mut shuffle_rng = rng.fork();

    let mut s_w_in = AdamState::new(1, mapper.w_in.rows() * mapper.w_in.cols());
    let mut s_b_in = AdamState::new(1, mapper.b_in.len());
    let mut s_w_out = AdamState::new(1, mapper.w_out.rows() * mapper.w_out.cols());
    let mut s_b_out = AdamState::new(1, mapper.b_out.len());

    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        shuffle_rng.shuffle(&mut order);
        let mut weighted = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<(&[f64], &[f64])> = chunk
                .iter()
                .map(|&i| (pairs[i].0.as_slice(), pairs[i].1.as_slice()))
                .collect();
            let (loss, g) = mapper.loss_and_gradients(&batch, w)?;
            weighted += loss * batch.len() as f64;
            let lr = cfg.learning_rate;
            s_w_in.step(&cfg.adam, lr, mapper.w_in.as_mut_slice(), g.w_in.as_slice());
            s_b_in.step(&cfg.adam, lr, &mut mapper.b_in, &g.b_in);
            s_w_out.step(&cfg.adam, lr, mapper.w_out.as_mut_slice(), g.w_out.as_slice());
            s_b_out.step(&cfg.adam, lr, &mut mapper.b_out, &g.b_out);
        }
        epoch_losses.push(weighted / pairs.len() as f64);
    }
    Ok((
        mapper,
        MapperReport {
            seed: cfg.seed,
            epoch_losses,
            wall_time_secs: start.elapsed().as_secs_f64(),
        },
    ))
}

/// Mean cosine between mapped inputs and targets.
pub fn mean_cosine(mapper: &Mapper, pairs: &[(Vec<f64>, Vec<f64>)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(EmoError::EmptyDataset);
    }
    let mut total = 0.0;
    for (x, y) in pairs {
        let pred = mapper.map(x)?;
        total += cosine_sim(&pred, y).unwrap_or(0.0);
    }
    Ok(total / pairs.len() as f64)
}

/// Synthetic pairs `y = R·x + σ·noise` with `R` a random `d_out × d_in` map
/// with orthonormal rows and `x` uniform on the unit sphere.
pub fn synthetic_linear_pairs(
    count: usize,
    d_in: usize,
    d_out: usize,
    noise: f64,
    rng: &mut Rng,
) -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
    let map = crate::linalg::orthogonal_init(d_out, d_in, rng)?;
    (0..count)
        .map(|_| {
            let x = crate::linalg::normalize(&rng.normal_vec(d_in))?;
            let y: Vec<f64> = map
                .row_iter()
                .map(|r| dot(r, &x) + noise * rng.normal())
                .collect();
            Ok((x, y))
        })
        .collect()
}
