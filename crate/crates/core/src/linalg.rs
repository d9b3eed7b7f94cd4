//! Vector and matrix kernels used throughout the engine.
//!
//! Everything is `f64`. Vectors are plain slices; [`Mat`] is a dense row-major
//! matrix with just the products the model code needs.

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, EmoError, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(EmoError::ShapeMismatch(format!(
                "{} values for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            check_dim(cols, r.len())?;
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    /// Entries drawn from N(0, std²).
    pub fn gaussian(rows: usize, cols: usize, std: f64, rng: &mut Rng) -> Self {
        let data = (0..rows * cols).map(|_| std * rng.normal()).collect();
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_iter(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.cols.max(1)).take(self.rows)
    }

    pub fn push_row(&mut self, row: &[f64]) -> Result<()> {
        if self.rows > 0 || self.cols > 0 {
            check_dim(self.cols, row.len())?;
        } else {
            self.cols = row.len();
        }
        self.data.extend_from_slice(row);
        self.rows += 1;
        Ok(())
    }

    /// `self · x` for `x` of length `cols`.
    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.cols, x.len())?;
        Ok(self.row_iter().map(|row| dot(row, x)).collect())
    }

    /// `selfᵀ · x` for `x` of length `rows`.
    pub fn t_matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.rows, x.len())?;
        let mut out = vec![0.0; self.cols];
        for (row, &xi) in self.row_iter().zip(x) {
            for (o, &w) in out.iter_mut().zip(row) {
                *o += w * xi;
            }
        }
        Ok(out)
    }

    /// `self += scale · a bᵀ` where `a` has length `rows` and `b` length `cols`.
    pub fn add_outer(&mut self, scale: f64, a: &[f64], b: &[f64]) {
        debug_assert_eq!(a.len(), self.rows);
        debug_assert_eq!(b.len(), self.cols);
        for (r, &ar) in a.iter().enumerate() {
            let s = scale * ar;
            if s == 0.0 {
                continue;
            }
            for (o, &bc) in self.row_mut(r).iter_mut().zip(b) {
                *o += s * bc;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `self · selfᵀ`.
    pub fn gram(&self) -> Mat {
        let mut g = Mat::zeros(self.rows, self.rows);
        for i in 0..self.rows {
            for j in i..self.rows {
                let v = dot(self.row(i), self.row(j));
                g.set(i, j, v);
                g.set(j, i, v);
            }
        }
        g
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Unit-length copy of `a`.
pub fn normalize(a: &[f64]) -> Result<Vec<f64>> {
    let mut out = a.to_vec();
    normalize_in_place(&mut out)?;
    Ok(out)
}

/// Scale `a` to unit length. Vectors already unit within rounding are left
/// untouched so repeated normalization is a bitwise fixed point.
pub fn normalize_in_place(a: &mut [f64]) -> Result<()> {
    let n = norm(a);
    if n == 0.0 || !n.is_finite() {
        return Err(EmoError::ZeroVector);
    }
    if (n - 1.0).abs() <= 2.0 * f64::EPSILON {
        return Ok(());
    }
    a.iter_mut().for_each(|x| *x /= n);
    Ok(())
}

pub fn cosine_sim(a: &[f64], b: &[f64]) -> Result<f64> {
    check_dim(a.len(), b.len())?;
    let na = norm(a);
    let nb = norm(b);
    if na == 0.0 || nb == 0.0 {
        return Err(EmoError::ZeroVector);
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Gradient of `cos(a, b)` with respect to `a`, added into `out` scaled by `scale`.
///
/// d cos / da = b / (|a||b|) − cos · a / |a|²
pub(crate) fn add_cosine_grad(a: &[f64], b: &[f64], scale: f64, out: &mut [f64]) {
    let na = norm(a);
    let nb = norm(b);
    let c = dot(a, b) / (na * nb);
    let inv_ab = 1.0 / (na * nb);
    let inv_aa = 1.0 / (na * na);
    for ((o, &ai), &bi) in out.iter_mut().zip(a).zip(b) {
        *o += scale * (bi * inv_ab - c * ai * inv_aa);
    }
}

/// Temperature softmax with max subtraction.
pub fn softmax(xs: &[f64], temperature: f64) -> Result<Vec<f64>> {
    if xs.is_empty() {
        return Err(EmoError::EmptyInput);
    }
    if !(temperature > 0.0) {
        return Err(EmoError::InvalidTemperature(temperature));
    }
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = xs.iter().map(|x| ((x - max) / temperature).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

/// `log Σ exp(xᵢ)`.
pub(crate) fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

/// GELU in the exact form x·Φ(x).
pub fn gelu(x: f64) -> f64 {
    x * normal_cdf(x)
}

/// d/dx [x·Φ(x)] = Φ(x) + x·φ(x).
pub fn gelu_grad(x: f64) -> f64 {
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    normal_cdf(x) + x * pdf
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `rows` orthonormal vectors in R^`cols`.
///
/// A seeded Gaussian matrix is orthonormalized row by row with two passes of
/// modified Gram-Schmidt. This is the Q factor of its QR decomposition with
/// the diagonal of R positive, so the result is a deterministic function of
/// the seed.
pub fn orthogonal_init(rows: usize, cols: usize, rng: &mut Rng) -> Result<Mat> {
    if rows > cols {
        return Err(EmoError::TooManyRows { rows, cols });
    }
    let mut m = Mat::gaussian(rows, cols, 1.0, rng);
    for i in 0..rows {
        for _pass in 0..2 {
            for j in 0..i {
                let (done, rest) = m.data.split_at_mut(i * cols);
                let prev = &done[j * cols..(j + 1) * cols];
                let cur = &mut rest[..cols];
                let proj = dot(cur, prev);
                for (c, &p) in cur.iter_mut().zip(prev) {
                    *c -= proj * p;
                }
            }
        }
        // A Gaussian row lying in the span of the previous rows has probability zero.
        normalize_in_place(m.row_mut(i))?;
    }
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use crate::rng::Rng;

    #[test]
    fn cosine_examples() {
        let u = [0.3, -1.2, 4.0];
        assert!((cosine_sim(&u, &u).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(cosine_sim(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        // 1/√2 from a 40-digit evaluation.
        let c = cosine_sim(&[1.0, 0.0], &[1.0, 1.0]).unwrap();
        assert!((c - 0.707_106_781_186_547_5).abs() < 1e-9);
    }

    #[test]
    fn cosine_errors() {
        assert!(matches!(
            cosine_sim(&[0.0, 0.0], &[1.0, 0.0]),
            Err(EmoError::ZeroVector)
        ));
        assert!(matches!(
            cosine_sim(&[1.0], &[1.0, 0.0]),
            Err(EmoError::DimMismatch { .. })
        ));
    }

    #[test]
    fn softmax_examples() {
        let w = softmax(&[2.5, 2.5, 2.5], 0.3).unwrap();
        for x in w {
            assert!((x - 1.0 / 3.0).abs() < 1e-15);
        }
        let w = softmax(&[1.0, 0.0], 0.1).unwrap();
        assert!((w[0] - 0.999_954_602_131_297_6).abs() < 1e-7);
        assert!((w[1] - 0.000_045_397_868_702_434_4).abs() < 1e-7);
        assert_eq!(softmax(&[5.0], 0.1).unwrap(), vec![1.0]);
    }

    #[test]
    fn softmax_errors() {
        assert!(matches!(softmax(&[], 1.0), Err(EmoError::EmptyInput)));
        assert!(matches!(
            softmax(&[1.0], 0.0),
            Err(EmoError::InvalidTemperature(_))
        ));
        assert!(matches!(
            softmax(&[1.0], -2.0),
            Err(EmoError::InvalidTemperature(_))
        ));
    }

    #[test]
    fn gelu_examples() {
        assert_eq!(gelu(0.0), 0.0);
        assert!((gelu(10.0) - 10.0).abs() < 1e-9);
        assert!((gelu(1.0) - 0.841_344_746_068_542_9).abs() < 1e-7);
    }

    #[test]
    fn gelu_grad_matches_central_difference() {
        for i in -40..=40 {
            let x = i as f64 * 0.25;
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8, "x={x}");
        }
    }

    #[test]
    fn gelu_monotone_above_its_minimum() {
        // x·Φ(x) dips to about -0.17 at x ≈ -0.7518 and is nondecreasing from there on.
        assert!(gelu(-0.75) < gelu(-3.0));
        let grid: Vec<f64> = (0..=2000).map(|i| -10.0 + i as f64 * 0.01).collect();
        let start = grid.iter().position(|&x| x >= -0.7517916).unwrap();
        for w in grid[start..].windows(2) {
            assert!(gelu(w[1]) >= gelu(w[0]));
        }
    }

    #[test]
    fn orthogonal_small_and_deterministic() {
        let m = orthogonal_init(2, 2, &mut Rng::new(3)).unwrap();
        assert!(dot(m.row(0), m.row(1)).abs() < 1e-12);
        assert!((norm(m.row(0)) - 1.0).abs() < 1e-12);
        let again = orthogonal_init(2, 2, &mut Rng::new(3)).unwrap();
        assert_eq!(m, again);
        assert!(matches!(
            orthogonal_init(3, 2, &mut Rng::new(3)),
            Err(EmoError::TooManyRows { rows: 3, cols: 2 })
        ));
    }

    #[test]
    fn orthogonal_full_scale_gram_is_identity() {
        let m = orthogonal_init(1024, 1024, &mut Rng::new(11)).unwrap();
        let g = m.gram();
        let mut worst = 0.0f64;
        for i in 0..1024 {
            for j in 0..1024 {
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((g.get(i, j) - target).abs());
            }
        }
        assert!(worst < 1e-8, "max deviation {worst}");
    }

    #[test]
    fn matvec_and_transpose_agree_with_loops() {
        let m = Mat::from_rows(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]).unwrap();
        assert_eq!(m.matvec(&[1.0, 0.0, -1.0]).unwrap(), vec![-2.0, -2.0]);
        assert_eq!(m.t_matvec(&[1.0, 1.0]).unwrap(), vec![5.0, 7.0, 9.0]);
    }

    proptest! {
        #[test]
        fn softmax_sums_to_one(
            xs in prop::collection::vec(-50.0f64..50.0, 1..4096),
            t_idx in 0usize..4,
        ) {
            let tau = [0.01, 0.1, 1.0, 10.0][t_idx];
            let w = softmax(&xs, tau).unwrap();
            let s: f64 = w.iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
        }

        #[test]
        fn softmax_shift_invariant(
            xs in prop::collection::vec(-5.0f64..5.0, 1..64),
            shift in -100.0f64..100.0,
            t_idx in 0usize..4,
        ) {
            let tau = [0.01, 0.1, 1.0, 10.0][t_idx];
            let a = softmax(&xs, tau).unwrap();
            let shifted: Vec<f64> = xs.iter().map(|x| x + shift).collect();
            let b = softmax(&shifted, tau).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn softmax_preserves_order(xs in prop::collection::vec(-5.0f64..5.0, 2..32)) {
            let w = softmax(&xs, 1.0).unwrap();
            for i in 0..xs.len() {
                for j in 0..xs.len() {
                    if xs[i] < xs[j] {
                        prop_assert!(w[i] <= w[j]);
                    }
                }
            }
        }

        #[test]
        fn cosine_scale_invariant(
            a in prop::collection::vec(-1.0f64..1.0, 8),
            b in prop::collection::vec(-1.0f64..1.0, 8),
            alpha in 0.01f64..100.0,
            beta in 0.01f64..100.0,
        ) {
            prop_assume!(norm(&a) > 1e-3 && norm(&b) > 1e-3);
            let sa: Vec<f64> = a.iter().map(|x| alpha * x).collect();
            let sb: Vec<f64> = b.iter().map(|x| beta * x).collect();
            let c0 = cosine_sim(&a, &b).unwrap();
            let c1 = cosine_sim(&sa, &sb).unwrap();
            prop_assert!((c0 - c1).abs() < 1e-12);
            prop_assert!((c0 - cosine_sim(&b, &a).unwrap()).abs() < 1e-15);
        }
    }
}
