//! Dynamic prototype bank with usage tracking and merge/split adaptation.
//!
//! Prototypes are stored as unit-norm rows so cosine similarity reduces to a
//! dot product. Adaptation follows the densification idea from Gaussian
//! splatting: near-duplicate prototypes are collapsed (merge) and heavily used
//! prototypes are cloned with a small perturbation (split).

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, EmoError, Result};
use crate::linalg::{cosine_sim, dot, norm, normalize, normalize_in_place, orthogonal_init, Mat};
use crate::rng::Rng;

pub const DEFAULT_MERGE_THRESHOLD: f64 = 0.3;
pub const DEFAULT_SPLIT_THRESHOLD: f64 = 0.7;
pub const DEFAULT_MAX_SPLIT_FRACTION: f64 = 0.1;
/// Magnitude of the orthogonal perturbation applied to split children.
pub const SPLIT_EPSILON: f64 = 0.05;
/// Row-norm tolerance held by every in-memory bank.
pub const UNIT_NORM_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrototypeBank {
    prototypes: Mat,
    usage: Vec<u64>,
    merge_threshold: f64,
    split_threshold: f64,
    generation: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergeReport {
    pub merged_groups: Vec<Vec<usize>>,
    pub k_before: usize,
    pub k_after: usize,
    /// For each row of the new bank, the old rows it was built from.
    pub sources: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitReport {
    pub split_indices: Vec<usize>,
    pub k_before: usize,
    pub k_after: usize,
}

impl PrototypeBank {
    /// Bank of `k` orthonormal prototypes in R^`dim`.
    pub fn orthogonal(
        k: usize,
        dim: usize,
        merge_threshold: f64,
        split_threshold: f64,
        rng: &mut Rng,
    ) -> Result<Self> {
        let prototypes = orthogonal_init(k, dim, rng)?;
        Self::from_parts(prototypes, vec![0; k], merge_threshold, split_threshold, 0)
    }

    /// Build from arbitrary nonzero rows; each row is normalized.
    pub fn from_rows(rows: &[Vec<f64>], merge_threshold: f64, split_threshold: f64) -> Result<Self> {
        let mut m = Mat::from_rows(rows)?;
        for r in 0..m.rows() {
            normalize_in_place(m.row_mut(r))?;
        }
        let k = m.rows();
        Self::from_parts(m, vec![0; k], merge_threshold, split_threshold, 0)
    }

    /// Assemble a bank from stored parts, validating every invariant.
    pub fn from_parts(
        prototypes: Mat,
        usage: Vec<u64>,
        merge_threshold: f64,
        split_threshold: f64,
        generation: u64,
    ) -> Result<Self> {
        let bank = Self {
            prototypes,
            usage,
            merge_threshold,
            split_threshold,
            generation,
        };
        bank.validate(UNIT_NORM_TOL)?;
        Ok(bank)
    }

    pub fn validate(&self, norm_tol: f64) -> Result<()> {
        let k = self.prototypes.rows();
        if k == 0 || self.prototypes.cols() == 0 {
            return Err(EmoError::InvariantViolation("empty prototype bank".into()));
        }
        if self.usage.len() != k {
            return Err(EmoError::InvariantViolation(format!(
                "{} usage counters for {k} prototypes",
                self.usage.len()
            )));
        }
        if !(self.merge_threshold > -1.0 && self.merge_threshold < 1.0) {
            return Err(EmoError::InvariantViolation(format!(
                "merge threshold {} outside (-1, 1)",
                self.merge_threshold
            )));
        }
        if !(self.split_threshold > 0.0) {
            return Err(EmoError::InvariantViolation(format!(
                "split threshold {} must be positive",
                self.split_threshold
            )));
        }
        for (i, row) in self.prototypes.row_iter().enumerate() {
            let n = norm(row);
            if !n.is_finite() || (n - 1.0).abs() > norm_tol {
                return Err(EmoError::InvariantViolation(format!(
                    "prototype {i} has norm {n}"
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.prototypes.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.prototypes.cols()
    }

    pub fn prototypes(&self) -> &Mat {
        &self.prototypes
    }

    pub fn prototype(&self, i: usize) -> &[f64] {
        self.prototypes.row(i)
    }

    pub fn usage(&self) -> &[u64] {
        &self.usage
    }

    pub fn total_usage(&self) -> u64 {
        self.usage.iter().sum()
    }

    pub fn merge_threshold(&self) -> f64 {
        self.merge_threshold
    }

    pub fn split_threshold(&self) -> f64 {
        self.split_threshold
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    /// Mutable access for the optimizer; callers must call [`Self::renormalize`] afterwards.
    pub(crate) fn prototypes_mut(&mut self) -> &mut Mat {
        &mut self.prototypes
    }

    pub fn renormalize(&mut self) -> Result<()> {
        for r in 0..self.prototypes.rows() {
            normalize_in_place(self.prototypes.row_mut(r))?;
        }
        Ok(())
    }

    /// Nearest prototype by cosine similarity; ties go to the lowest index.
    pub fn assign(&self, f: &[f64]) -> Result<(usize, f64)> {
        check_dim(self.dim(), f.len())?;
        let nf = norm(f);
        if nf == 0.0 {
            return Err(EmoError::ZeroVector);
        }
        let mut best = (0, f64::NEG_INFINITY);
        for (i, p) in self.prototypes.row_iter().enumerate() {
            let s = dot(f, p) / nf;
            if s > best.1 {
                best = (i, s);
            }
        }
        Ok((best.0, best.1.clamp(-1.0, 1.0)))
    }

    pub fn update_usage(&mut self, assignments: &[usize]) -> Result<()> {
        let k = self.len();
        if let Some(&bad) = assignments.iter().find(|&&i| i >= k) {
            return Err(EmoError::IndexOutOfRange { index: bad, len: k });
        }
        for &i in assignments {
            self.usage[i] += 1;
        }
        Ok(())
    }

    /// Collapse each connected component of the graph `cos(p_i, p_j) > τ_m`
    /// into its usage-weighted mean direction.
    pub fn merge_step(&mut self) -> MergeReport {
        let k = self.len();
        let mut parent: Vec<usize> = (0..k).collect();
        fn find(parent: &mut [usize], mut i: usize) -> usize {
            while parent[i] != i {
                parent[i] = parent[parent[i]];
                i = parent[i];
            }
            i
        }
        for i in 0..k {
            for j in i + 1..k {
                let c = dot(self.prototypes.row(i), self.prototypes.row(j));
                if c > self.merge_threshold {
                    let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
                    if ri != rj {
                        parent[ri.max(rj)] = ri.min(rj);
                    }
                }
            }
        }
        // Components in order of their smallest member.
        let mut groups: Vec<Vec<usize>> = Vec::new();
        let mut slot = vec![usize::MAX; k];
        for i in 0..k {
            let root = find(&mut parent, i);
            if slot[root] == usize::MAX {
                slot[root] = groups.len();
                groups.push(Vec::new());
            }
            groups[slot[root]].push(i);
        }

        let mut prototypes = Mat::zeros(0, self.dim());
        let mut usage = Vec::with_capacity(groups.len());
        let mut merged_groups = Vec::new();
        for group in &groups {
            if group.len() == 1 {
                prototypes
                    .push_row(self.prototypes.row(group[0]))
                    .expect("same dimension");
                usage.push(self.usage[group[0]]);
                continue;
            }
            let total: u64 = group.iter().map(|&i| self.usage[i]).sum();
            let row = self.group_mean(group, total > 0)
                .or_else(|| self.group_mean(group, false))
                .unwrap_or_else(|| {
                    // Members cancel exactly; keep the most used one.
                    let best = *group
                        .iter()
                        .max_by(|&&a, &&b| self.usage[a].cmp(&self.usage[b]).then(b.cmp(&a)))
                        .expect("nonempty group");
                    self.prototypes.row(best).to_vec()
                });
            prototypes.push_row(&row).expect("same dimension");
            usage.push(total);
            merged_groups.push(group.clone());
        }

        let report = MergeReport {
            merged_groups,
            k_before: k,
            k_after: groups.len(),
            sources: groups,
        };
        self.prototypes = prototypes;
        self.usage = usage;
        self.generation += 1;
        report
    }

    fn group_mean(&self, group: &[usize], weighted: bool) -> Option<Vec<f64>> {
        let mut acc = vec![0.0; self.dim()];
        for &i in group {
            let w = if weighted { self.usage[i] as f64 } else { 1.0 };
            for (a, &p) in acc.iter_mut().zip(self.prototypes.row(i)) {
                *a += w * p;
            }
        }
        if norm(&acc) < 1e-12 {
            return None;
        }
        normalize(&acc).ok()
    }

    /// Clone heavily used prototypes (`n_i > τ_s · n̄`) into two perturbed children.
    ///
    /// At most `⌈max_split_fraction · K⌉` prototypes split per call, chosen by
    /// descending usage with ties to the lowest index. The first child replaces
    /// its parent in place; the second is appended.
    pub fn split_step(&mut self, rng: &mut Rng, max_split_fraction: f64) -> Result<SplitReport> {
        if !(max_split_fraction > 0.0 && max_split_fraction <= 1.0) {
            return Err(EmoError::InvalidConfig(format!(
                "max_split_fraction {max_split_fraction} outside (0, 1]"
            )));
        }
        let k = self.len();
        let mean = self.total_usage() as f64 / k as f64;
        let threshold = self.split_threshold * mean;
        let mut candidates: Vec<usize> = (0..k)
            .filter(|&i| self.usage[i] as f64 > threshold)
            .collect();
        candidates.sort_by(|&a, &b| self.usage[b].cmp(&self.usage[a]).then(a.cmp(&b)));
        let cap = (max_split_fraction * k as f64 - 1e-9).ceil().max(1.0) as usize;
        candidates.truncate(cap);
        candidates.sort_unstable();

        for &i in &candidates {
            let parent = self.prototypes.row(i).to_vec();
            let direction = random_orthogonal_direction(&parent, rng);
            let mut plus: Vec<f64> = parent
                .iter()
                .zip(&direction)
                .map(|(p, u)| p + SPLIT_EPSILON * u)
                .collect();
            let mut minus: Vec<f64> = parent
                .iter()
                .zip(&direction)
                .map(|(p, u)| p - SPLIT_EPSILON * u)
                .collect();
            normalize_in_place(&mut plus)?;
            normalize_in_place(&mut minus)?;
            let n = self.usage[i];
            self.prototypes.row_mut(i).copy_from_slice(&plus);
            self.usage[i] = n / 2;
            self.prototypes.push_row(&minus)?;
            self.usage.push(n - n / 2);
        }
        self.generation += 1;
        Ok(SplitReport {
            split_indices: candidates.clone(),
            k_before: k,
            k_after: k + candidates.len(),
        })
    }

    /// Mean over unordered pairs of the squared cosine; 0 for a single prototype.
    pub fn mean_squared_cosine(&self) -> f64 {
        let k = self.len();
        if k < 2 {
            return 0.0;
        }
        let mut total = 0.0;
        for i in 0..k {
            for j in i + 1..k {
                let c = cosine_sim(self.prototypes.row(i), self.prototypes.row(j))
                    .expect("unit rows");
                total += c * c;
            }
        }
        total / (k * (k - 1) / 2) as f64
    }
}

fn random_orthogonal_direction(p: &[f64], rng: &mut Rng) -> Vec<f64> {
    loop {
        let mut u = rng.normal_vec(p.len());
        let proj = dot(&u, p) / dot(p, p);
        for (ui, &pi) in u.iter_mut().zip(p) {
            *ui -= proj * pi;
        }
        if normalize_in_place(&mut u).is_ok() && norm(&u) > 0.5 {
            return u;
        }
        if p.len() == 1 {
            // No orthogonal complement in one dimension.
            return vec![0.0];
        }
    }
}
