//! Inter-annotator agreement, the Friedman rank test and embedding alignment.

use std::collections::BTreeMap;
use std::io::Read;

use serde::{Deserialize, Serialize};

use crate::error::{EmoError, Result};
use crate::linalg::cosine_sim;

/// Categorical codes, one row per annotator and one column per item.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationMatrix {
    labels: Vec<Vec<usize>>,
    category_count: usize,
}

impl AnnotationMatrix {
    pub fn new(labels: Vec<Vec<usize>>, category_count: usize) -> Result<Self> {
        let items = labels.first().map_or(0, Vec::len);
        if items == 0 {
            return Err(EmoError::EmptyInput);
        }
        for row in &labels {
            if row.len() != items {
                return Err(EmoError::DimMismatch {
                    expected: items,
                    got: row.len(),
                });
            }
            if let Some(&bad) = row.iter().find(|&&c| c >= category_count) {
                return Err(EmoError::IndexOutOfRange {
                    index: bad,
                    len: category_count,
                });
            }
        }
        Ok(Self { labels, category_count })
    }

    pub fn annotators(&self) -> usize {
        self.labels.len()
    }

    pub fn items(&self) -> usize {
        self.labels[0].len()
    }

    pub fn category_count(&self) -> usize {
        self.category_count
    }

    pub fn row(&self, annotator: usize) -> &[usize] {
        &self.labels[annotator]
    }

    /// Parse CSV with a header row and one annotator per row. A first header
    /// cell of `annotator` marks an identifier column, which is skipped. The
    /// category count is one more than the largest code.
    pub fn from_csv<R: Read>(reader: R) -> Result<Self> {
        let rows = parse_csv(reader, "annotator", |cell| cell.parse::<usize>().ok())?;
        let count = rows.iter().flatten().max().map_or(1, |m| m + 1);
        Self::new(rows, count)
    }
}

/// Real-valued ratings, one row per subject and one column per treatment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatingMatrix {
    values: Vec<Vec<f64>>,
}

impl RatingMatrix {
    pub fn new(values: Vec<Vec<f64>>) -> Result<Self> {
        let k = values.first().map_or(0, Vec::len);
        if values.len() < 2 || k < 2 {
            return Err(EmoError::TooFewSubjects {
                subjects: values.len(),
                treatments: k,
            });
        }
        for row in &values {
            if row.len() != k {
                return Err(EmoError::DimMismatch {
                    expected: k,
                    got: row.len(),
                });
            }
            if row.iter().any(|x| !x.is_finite()) {
                return Err(EmoError::InvalidConfig("ratings must be finite".into()));
            }
        }
        Ok(Self { values })
    }

    pub fn subjects(&self) -> usize {
        self.values.len()
    }

    pub fn treatments(&self) -> usize {
        self.values[0].len()
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.values
    }

    /// Parse CSV with a header row and one subject per row; a first header
    /// cell of `subject` marks an identifier column.
    pub fn from_csv<R: Read>(reader: R) -> Result<Self> {
        let rows = parse_csv(reader, "subject", |cell| cell.parse::<f64>().ok().filter(|x| x.is_finite()))?;
        Self::new(rows)
    }
}

fn parse_csv<R: Read, T>(reader: R, id_column: &str, parse: impl Fn(&str) -> Option<T>) -> Result<Vec<Vec<T>>> {
    let csv_err = |row: usize, column: usize, message: String| EmoError::CsvFormat { row, column, message };
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| csv_err(1, 1, e.to_string()))?
        .clone();
    let skip = usize::from(headers.get(0).is_some_and(|h| h.eq_ignore_ascii_case(id_column)));
    let width = headers.len();
    let mut rows = Vec::new();
    for (i, record) in rdr.records().enumerate() {
        let row = i + 2;
        let record = record.map_err(|e| csv_err(row, 1, e.to_string()))?;
        if record.len() != width {
            return Err(csv_err(
                row,
                record.len().min(width) + 1,
                format!("expected {width} cells, found {}", record.len()),
            ));
        }
        let parsed = record
            .iter()
            .enumerate()
            .skip(skip)
            .map(|(c, cell)| parse(cell).ok_or_else(|| csv_err(row, c + 1, format!("cannot parse {cell:?}"))))
            .collect::<Result<Vec<T>>>()?;
        rows.push(parsed);
    }
    Ok(rows)
}

/// Agreement counts: matching items and the marginal product sum, both exact.
fn agreement(a: &[usize], b: &[usize], category_count: usize) -> Result<(u64, u64, u64)> {
    if a.len() != b.len() {
        return Err(EmoError::DimMismatch {
            expected: a.len(),
            got: b.len(),
        });
    }
    if a.is_empty() {
        return Err(EmoError::EmptyInput);
    }
    let mut ca = vec![0u64; category_count];
    let mut cb = vec![0u64; category_count];
    let mut agree = 0u64;
    for (&x, &y) in a.iter().zip(b) {
        for code in [x, y] {
            if code >= category_count {
                return Err(EmoError::IndexOutOfRange {
                    index: code,
                    len: category_count,
                });
            }
        }
        ca[x] += 1;
        cb[y] += 1;
        agree += u64::from(x == y);
    }
    let chance: u64 = ca.iter().zip(&cb).map(|(p, q)| p * q).sum();
    Ok((a.len() as u64, agree, chance))
}

/// Unweighted Cohen's kappa for two nominal annotations.
///
/// When both annotators use one identical category throughout, chance
/// agreement is 1 and kappa is defined as 1.
pub fn cohen_kappa(a: &[usize], b: &[usize], category_count: usize) -> Result<f64> {
    let (n, agree, chance) = agreement(a, b, category_count)?;
    let n2 = n * n;
    if chance == n2 {
        return if agree == n { Ok(1.0) } else { Err(EmoError::DegenerateMarginals) };
    }
    // (p_o - p_e) / (1 - p_e) scaled by n^2 keeps everything in integers.
    let num = (n * agree) as f64 - chance as f64;
    Ok(num / (n2 - chance) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairKappa {
    pub a: usize,
    pub b: usize,
    pub kappa: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairwiseKappa {
    pub mean: f64,
    /// Population standard deviation over the non-degenerate pairs.
    pub std: f64,
    pub pairs: Vec<PairKappa>,
    /// Pairs whose marginals leave no room for chance correction.
    pub degenerate: Vec<(usize, usize)>,
}

pub fn pairwise_kappa(m: &AnnotationMatrix) -> Result<PairwiseKappa> {
    let r = m.annotators();
    if r < 2 {
        return Err(EmoError::TooFewSubjects {
            subjects: r,
            treatments: m.items(),
        });
    }
    let mut pairs = Vec::new();
    let mut degenerate = Vec::new();
    for a in 0..r {
        for b in a + 1..r {
            let (n, _, chance) = agreement(m.row(a), m.row(b), m.category_count())?;
            if chance == n * n {
                degenerate.push((a, b));
            } else {
                pairs.push(PairKappa {
                    a,
                    b,
                    kappa: cohen_kappa(m.row(a), m.row(b), m.category_count())?,
                });
            }
        }
    }
    if pairs.is_empty() {
        return Err(EmoError::DegenerateMarginals);
    }
    let count = pairs.len() as f64;
    let mean = pairs.iter().map(|p| p.kappa).sum::<f64>() / count;
    let var = pairs.iter().map(|p| (p.kappa - mean).powi(2)).sum::<f64>() / count;
    Ok(PairwiseKappa {
        mean,
        std: var.sqrt(),
        pairs,
        degenerate,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FriedmanResult {
    pub chi2: f64,
    /// Chi-square approximation with `k - 1` degrees of freedom.
    pub p_value: f64,
    /// Exact within-subject permutation p-value, when the design is small enough.
    pub p_exact: Option<f64>,
    pub df: usize,
    pub subjects: usize,
    pub treatments: usize,
}

/// Ranks starting at 1, ties receiving the average of the positions they span.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&i, &j| values[i].total_cmp(&values[j]));
    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && values[order[end]] == values[order[start]] {
            end += 1;
        }
        let avg = (start + end + 1) as f64 / 2.0;
        for &i in &order[start..end] {
            ranks[i] = avg;
        }
        start = end;
    }
    ranks
}

/// Friedman statistic with the usual correction for tied ranks.
pub fn friedman_statistic(m: &RatingMatrix) -> f64 {
    let n = m.subjects() as f64;
    let k = m.treatments();
    let kf = k as f64;
    let mut rank_sums = vec![0.0; k];
    let mut tie_term = 0.0;
    for row in m.rows() {
        let ranks = average_ranks(row);
        for (s, r) in rank_sums.iter_mut().zip(&ranks) {
            *s += r;
        }
        let mut sorted = ranks;
        sorted.sort_by(f64::total_cmp);
        let mut i = 0;
        while i < sorted.len() {
            let j = sorted[i..].iter().take_while(|&&r| r == sorted[i]).count();
            let t = j as f64;
            tie_term += t * t * t - t;
            i += j;
        }
    }
    let centre = (kf + 1.0) / 2.0;
    let spread: f64 = rank_sums.iter().map(|s| (s / n - centre).powi(2)).sum();
    let raw = 12.0 * n / (kf * (kf + 1.0)) * spread;
    let correction = 1.0 - tie_term / (n * (kf * kf * kf - kf));
    if correction <= 0.0 {
        // Every subject rated all treatments equally.
        return 0.0;
    }
    raw / correction
}

pub fn friedman_test(m: &RatingMatrix) -> FriedmanResult {
    let chi2 = friedman_statistic(m);
    let df = m.treatments() - 1;
    FriedmanResult {
        chi2,
        p_value: chi2_sf(chi2, df as f64),
        p_exact: friedman_exact_p(m),
        df,
        subjects: m.subjects(),
        treatments: m.treatments(),
    }
}

/// Largest number of distinct rank-sum vectors tracked by [`friedman_exact_p`].
pub const EXACT_MAX_STATES: usize = 1_000_000;

/// Exact p-value of the Friedman statistic under independent within-subject
/// permutation, by convolving the rank-sum distribution subject by subject.
///
/// Returns `None` when the state space exceeds [`EXACT_MAX_STATES`] or the
/// permutation count overflows. Ties are handled by permuting each subject's
/// own average ranks, which leaves the tie correction unchanged.
pub fn friedman_exact_p(m: &RatingMatrix) -> Option<f64> {
    // Average ranks are multiples of 1/2, so doubled ranks are exact integers.
    let rows: Vec<Vec<i64>> = m
        .rows()
        .iter()
        .map(|r| average_ranks(r).iter().map(|x| (2.0 * x) as i64).collect())
        .collect();
    let k = m.treatments();
    let mut observed = vec![0i64; k];
    for row in &rows {
        for (s, r) in observed.iter_mut().zip(row) {
            *s += r;
        }
    }
    let sum_sq = |v: &[i64]| v.iter().map(|x| x * x).sum::<i64>();
    let target = sum_sq(&observed);

    let mut dist: BTreeMap<Vec<i64>, u128> = BTreeMap::from([(vec![0; k], 1)]);
    let mut total: u128 = 1;
    for row in &rows {
        if permutation_count(row).map_or(true, |c| c > EXACT_MAX_STATES as u128) {
            return None;
        }
        let perms = distinct_permutations(row);
        total = total.checked_mul(perms.len() as u128)?;
        let mut next: BTreeMap<Vec<i64>, u128> = BTreeMap::new();
        for (state, count) in &dist {
            for p in &perms {
                let key: Vec<i64> = state.iter().zip(p).map(|(a, b)| a + b).collect();
                *next.entry(key).or_insert(0) += count;
            }
            if next.len() > EXACT_MAX_STATES {
                return None;
            }
        }
        dist = next;
    }
    let hits: u128 = dist
        .iter()
        .filter(|(state, _)| sum_sq(state) >= target)
        .map(|(_, c)| c)
        .sum();
    Some(hits as f64 / total as f64)
}

/// Number of distinct orderings of `values`, or `None` on overflow.
fn permutation_count(values: &[i64]) -> Option<u128> {
    let mut sorted = values.to_vec();
    sorted.sort_unstable();
    let mut count: u128 = 1;
    let mut run = 0u128;
    for (i, v) in sorted.iter().enumerate() {
        run = if i > 0 && sorted[i - 1] == *v { run + 1 } else { 1 };
        // Multiply by (i + 1) / run, which keeps the running value a multinomial coefficient.
        count = count.checked_mul(i as u128 + 1)? / run;
    }
    Some(count)
}

/// Every distinct ordering of `values`, in lexicographic order.
fn distinct_permutations(values: &[i64]) -> Vec<Vec<i64>> {
    let mut current = values.to_vec();
    current.sort_unstable();
    let mut out = vec![current.clone()];
    loop {
        let Some(i) = (1..current.len()).rev().find(|&i| current[i - 1] < current[i]) else {
            return out;
        };
        let j = (i..current.len()).rev().find(|&j| current[j] > current[i - 1]).expect("pivot exists");
        current.swap(i - 1, j);
        current[i..].reverse();
        out.push(current.clone());
    }
}

const GAMMA_EPS: f64 = 1e-16;
const GAMMA_MAX_ITER: usize = 10_000;

/// Regularized lower incomplete gamma `P(a, x)` by its power series; best for `x < a + 1`.
fn gamma_p_series(a: f64, x: f64) -> f64 {
    let mut term = 1.0 / a;
    let mut sum = term;
    let mut ap = a;
    for _ in 0..GAMMA_MAX_ITER {
        ap += 1.0;
        term *= x / ap;
        sum += term;
        if term.abs() < sum.abs() * GAMMA_EPS {
            break;
        }
    }
    (sum.ln() - x + a * x.ln() - libm::lgamma(a)).exp()
}

/// Regularized upper incomplete gamma `Q(a, x)` by Lentz's continued fraction; best for `x >= a + 1`.
fn gamma_q_fraction(a: f64, x: f64) -> f64 {
    const TINY: f64 = 1e-300;
    let mut b = x + 1.0 - a;
    let mut c = 1.0 / TINY;
    let mut d = 1.0 / b;
    let mut h = d;
    for i in 1..GAMMA_MAX_ITER {
        let an = -(i as f64) * (i as f64 - a);
        b += 2.0;
        d = an * d + b;
        if d.abs() < TINY {
            d = TINY;
        }
        c = b + an / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let delta = d * c;
        h *= delta;
        if (delta - 1.0).abs() < GAMMA_EPS {
            break;
        }
    }
    (h.ln() - x + a * x.ln() - libm::lgamma(a)).exp()
}

/// Regularized upper incomplete gamma function `Q(a, x)` for `a > 0`, `x >= 0`.
pub fn gamma_q(a: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    if x < a + 1.0 {
        (1.0 - gamma_p_series(a, x)).clamp(0.0, 1.0)
    } else {
        gamma_q_fraction(a, x).clamp(0.0, 1.0)
    }
}

/// Survival function of the chi-square distribution with `df` degrees of freedom.
pub fn chi2_sf(x: f64, df: f64) -> f64 {
    gamma_q(df / 2.0, x / 2.0)
}

/// Cosine similarity scaled to [0, 100], negative similarity clamped to 0.
pub fn alignment_score(a: &[f64], b: &[f64]) -> Result<f64> {
    Ok(100.0 * cosine_sim(a, b)?.max(0.0))
}
