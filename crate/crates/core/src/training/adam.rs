//! Adam with per-row step counters so individual rows can be reset.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub(crate) struct AdamState {
    row_len: usize,
    m: Vec<f64>,
    v: Vec<f64>,
    steps: Vec<u64>,
}

impl AdamState {
    /// State for `rows` rows of `row_len` parameters.
    pub fn new(rows: usize, row_len: usize) -> Self {
        Self {
            row_len,
            m: vec![0.0; rows * row_len],
            v: vec![0.0; rows * row_len],
            steps: vec![0; rows],
        }
    }

    pub fn step(&mut self, cfg: &AdamConfig, lr: f64, params: &mut [f64], grads: &[f64]) {
        debug_assert_eq!(params.len(), self.m.len());
        debug_assert_eq!(grads.len(), self.m.len());
        for (row, t) in self.steps.iter_mut().enumerate() {
            *t += 1;
            let bc1 = 1.0 - cfg.beta1.powi(*t as i32);
            let bc2 = 1.0 - cfg.beta2.powi(*t as i32);
            let span = row * self.row_len..(row + 1) * self.row_len;
            for i in span {
                let g = grads[i];
                self.m[i] = cfg.beta1 * self.m[i] + (1.0 - cfg.beta1) * g;
                self.v[i] = cfg.beta2 * self.v[i] + (1.0 - cfg.beta2) * g * g;
                let m_hat = self.m[i] / bc1;
                let v_hat = self.v[i] / bc2;
                params[i] -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
            }
        }
    }

    /// Rebuild the state after the row set changed. `sources[r]` lists the old
    /// rows that produced new row `r`; only rows with a single source keep
    /// their moments.
    pub fn remap_rows(&mut self, sources: &[Option<usize>]) {
        let mut next = AdamState::new(sources.len(), self.row_len);
        for (new_row, src) in sources.iter().enumerate() {
            if let Some(old) = *src {
                let (a, b) = (old * self.row_len, new_row * self.row_len);
                next.m[b..b + self.row_len].copy_from_slice(&self.m[a..a + self.row_len]);
                next.v[b..b + self.row_len].copy_from_slice(&self.v[a..a + self.row_len]);
                next.steps[new_row] = self.steps[old];
            }
        }
        *self = next;
    }
}
