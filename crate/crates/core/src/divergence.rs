//! Two-sample distances used as invariance penalties.
//!
//! * Squared MMD, biased (V-statistic) estimator with a Gaussian kernel
//!   `k(s, t) = exp(-|s - t|^2 / (2 sigma^2))`.
//! * CORAL: `|C_a - C_b|_F^2 / d^2` with unbiased sample covariances.
//!
//! Gradients are with respect to every row of both inputs. The MMD bandwidth
//! is held fixed while differentiating, including when it was resolved by
//! the median heuristic.

use std::collections::HashMap;

use rand::seq::index::sample as sample_indices;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::rng::rng_from_seed;

/// Above this many rows the median heuristic works on a fixed-seed subsample.
pub const MEDIAN_EXACT_LIMIT: usize = 2000;
const MEDIAN_SUBSAMPLE_SEED: u64 = 0x6D65_6469_616E;

/// Row-major `n x d` matrix of finite reals.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl SampleMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch {
                expected: rows * cols,
                got: data.len(),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(invalid("sample matrix entries must be finite"));
        }
        Ok(SampleMatrix { rows, cols, data })
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::DimensionMismatch {
                    expected: cols,
                    got: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        SampleMatrix::new(rows.len(), cols, data)
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        SampleMatrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn n(&self) -> usize {
        self.rows
    }

    pub fn d(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_rows(self) -> Vec<Vec<f64>> {
        self.data
            .chunks(self.cols.max(1))
            .map(<[f64]>::to_vec)
            .collect()
    }

    /// Stack two matrices with the same width.
    pub fn vstack(a: &SampleMatrix, b: &SampleMatrix) -> Result<SampleMatrix> {
        check_dims(a, b)?;
        let mut data = a.data.clone();
        data.extend_from_slice(&b.data);
        Ok(SampleMatrix {
            rows: a.rows + b.rows,
            cols: a.cols,
            data,
        })
    }

    /// Add `shift` to every row.
    pub fn translated(&self, shift: &[f64]) -> SampleMatrix {
        let mut out = self.clone();
        for i in 0..out.rows {
            for (v, s) in out.row_mut(i).iter_mut().zip(shift) {
                *v += s;
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bandwidth {
    Fixed(f64),
    Median,
}

/// Gaussian kernel specification.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub bandwidth: Bandwidth,
}

impl KernelSpec {
    pub fn gaussian(sigma: f64) -> Self {
        KernelSpec {
            bandwidth: Bandwidth::Fixed(sigma),
        }
    }

    pub fn median() -> Self {
        KernelSpec {
            bandwidth: Bandwidth::Median,
        }
    }

    /// Concrete bandwidth for this pair of samples.
    pub fn resolve(&self, a: &SampleMatrix, b: &SampleMatrix) -> Result<f64> {
        match self.bandwidth {
            Bandwidth::Fixed(s) if s > 0.0 && s.is_finite() => Ok(s),
            Bandwidth::Fixed(s) => Err(invalid(format!("bandwidth must be positive, got {s}"))),
            Bandwidth::Median => median_bandwidth(&SampleMatrix::vstack(a, b)?),
        }
    }
}

impl Default for KernelSpec {
    fn default() -> Self {
        KernelSpec::median()
    }
}

fn check_dims(a: &SampleMatrix, b: &SampleMatrix) -> Result<()> {
    if a.cols != b.cols {
        return Err(Error::DimensionMismatch {
            expected: a.cols,
            got: b.cols,
        });
    }
    Ok(())
}

fn sq_dist(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum()
}

/// Distinct rows in order of first appearance, with multiplicities and the
/// atom index of every row.
struct Atoms {
    points: Vec<Vec<f64>>,
    counts: Vec<usize>,
    of_row: Vec<usize>,
}

fn atoms<'a>(rows: impl Iterator<Item = &'a [f64]>) -> Atoms {
    let mut index: HashMap<Vec<u64>, usize> = HashMap::new();
    let mut out = Atoms {
        points: Vec::new(),
        counts: Vec::new(),
        of_row: Vec::new(),
    };
    for r in rows {
        let key: Vec<u64> = r.iter().map(|v| v.to_bits()).collect();
        let a = *index.entry(key).or_insert_with(|| {
            out.points.push(r.to_vec());
            out.counts.push(0);
            out.points.len() - 1
        });
        out.counts[a] += 1;
        out.of_row.push(a);
    }
    out
}

/// Median of a multiset given as `(value, multiplicity)` pairs, averaging
/// the two middle elements when the size is even.
fn median_of_counted(mut v: Vec<(f64, u64)>) -> Option<f64> {
    v.retain(|p| p.1 > 0);
    v.sort_by(|a, b| a.0.total_cmp(&b.0));
    let total: u64 = v.iter().map(|p| p.1).sum();
    if total == 0 {
        return None;
    }
    let at = |rank: u64| {
        let mut seen = 0;
        for &(x, c) in &v {
            seen += c;
            if seen > rank {
                return x;
            }
        }
        unreachable!("rank below total")
    };
    Some(if total % 2 == 1 {
        at(total / 2)
    } else {
        0.5 * (at(total / 2 - 1) + at(total / 2))
    })
}

/// Median pairwise Euclidean distance over the rows. When more than half of
/// the pairs coincide the median of the nonzero distances is used instead,
/// so the result is positive unless every row is identical.
pub fn median_bandwidth(pooled: &SampleMatrix) -> Result<f64> {
    if pooled.n() < 2 {
        return Err(invalid("median bandwidth needs at least two rows"));
    }
    let idx: Vec<usize> = if pooled.n() <= MEDIAN_EXACT_LIMIT {
        (0..pooled.n()).collect()
    } else {
        let mut rng = rng_from_seed(MEDIAN_SUBSAMPLE_SEED);
        let mut s = sample_indices(&mut rng, pooled.n(), MEDIAN_EXACT_LIMIT).into_vec();
        s.sort_unstable();
        s
    };
    // repeated rows are common (discrete features), so count distances
    // between distinct rows instead of listing every pair
    let at = atoms(idx.iter().map(|&i| pooled.row(i)));
    let mut dists: Vec<(f64, u64)> = at
        .counts
        .iter()
        .map(|&c| (0.0, (c * (c - 1) / 2) as u64))
        .collect();
    for i in 0..at.points.len() {
        for j in i + 1..at.points.len() {
            let d = sq_dist(&at.points[i], &at.points[j]).sqrt();
            dists.push((d, (at.counts[i] * at.counts[j]) as u64));
        }
    }
    match median_of_counted(dists.clone()) {
        Some(m) if m > 0.0 => Ok(m),
        _ => median_of_counted(dists.into_iter().filter(|p| p.0 > 0.0).collect())
            .ok_or_else(|| invalid("all rows are identical; bandwidth would be zero")),
    }
}

fn check_nonempty(a: &SampleMatrix, b: &SampleMatrix) -> Result<()> {
    check_dims(a, b)?;
    if a.n() == 0 || b.n() == 0 {
        return Err(invalid("MMD needs at least one row on each side"));
    }
    Ok(())
}

/// Biased estimate of squared MMD; nonnegative and symmetric.
pub fn mmd2(a: &SampleMatrix, b: &SampleMatrix, k: &KernelSpec) -> Result<f64> {
    check_nonempty(a, b)?;
    let sigma = k.resolve(a, b)?;
    Ok(mmd2_value_and_grad(a, b, sigma).0)
}

/// Gradients of [`mmd2`] with respect to the rows of `a` and of `b`.
pub fn grad_mmd2(
    a: &SampleMatrix,
    b: &SampleMatrix,
    k: &KernelSpec,
) -> Result<(SampleMatrix, SampleMatrix)> {
    check_nonempty(a, b)?;
    let sigma = k.resolve(a, b)?;
    Ok(mmd2_value_and_grad(a, b, sigma).1)
}

/// Value and gradients at a fixed bandwidth.
///
/// Works on the distinct rows of each side: with atom weights `w` (counts
/// over sample size) the estimate is `w_a' K_aa w_a + w_b' K_bb w_b -
/// 2 w_a' K_ab w_b`, and every row at the same atom gets the same gradient.
pub fn mmd2_value_and_grad(
    a: &SampleMatrix,
    b: &SampleMatrix,
    sigma: f64,
) -> (f64, (SampleMatrix, SampleMatrix)) {
    let gamma = 1.0 / (2.0 * sigma * sigma);
    let inv_s2 = 1.0 / (sigma * sigma);
    let d = a.d();
    let aa = atoms((0..a.n()).map(|i| a.row(i)));
    let ab = atoms((0..b.n()).map(|i| b.row(i)));
    let wa: Vec<f64> = aa.counts.iter().map(|&c| c as f64 / a.n() as f64).collect();
    let wb: Vec<f64> = ab.counts.iter().map(|&c| c as f64 / b.n() as f64).collect();

    // d k(s, t) / d s = -k(s, t) (s - t) / sigma^2; accumulates
    // sum_j w_j k(s, t_j) and sum_j w_j dk(s, t_j) / ds for each own atom
    let pull = |own: &Atoms, other: &[Vec<f64>], w: &[f64]| -> (Vec<f64>, Vec<Vec<f64>>) {
        let mut ks = vec![0.0; own.points.len()];
        let mut gs = vec![vec![0.0; d]; own.points.len()];
        for (i, s) in own.points.iter().enumerate() {
            for (t, &wt) in other.iter().zip(w) {
                let kv = (-gamma * sq_dist(s, t)).exp();
                ks[i] += wt * kv;
                for (g, (x, y)) in gs[i].iter_mut().zip(s.iter().zip(t)) {
                    *g -= wt * kv * inv_s2 * (x - y);
                }
            }
        }
        (ks, gs)
    };
    let (k_aa, g_aa) = pull(&aa, &aa.points, &wa);
    let (k_ab, g_ab) = pull(&aa, &ab.points, &wb);
    let (k_bb, g_bb) = pull(&ab, &ab.points, &wb);
    let (_, g_ba) = pull(&ab, &aa.points, &wa);

    let dot = |w: &[f64], k: &[f64]| w.iter().zip(k).map(|(x, y)| x * y).sum::<f64>();
    let value = dot(&wa, &k_aa) + dot(&wb, &k_bb) - 2.0 * dot(&wa, &k_ab);

    let spread = |at: &Atoms, n: usize, own: &[Vec<f64>], cross: &[Vec<f64>]| {
        let per_atom: Vec<Vec<f64>> = own
            .iter()
            .zip(cross)
            .map(|(o, c)| {
                o.iter()
                    .zip(c)
                    .map(|(x, y)| 2.0 / n as f64 * (x - y))
                    .collect()
            })
            .collect();
        let mut g = SampleMatrix::zeros(n, d);
        for (i, &k) in at.of_row.iter().enumerate() {
            g.row_mut(i).copy_from_slice(&per_atom[k]);
        }
        g
    };
    let ga = spread(&aa, a.n(), &g_aa, &g_ab);
    let gb = spread(&ab, b.n(), &g_bb, &g_ba);
    (value.max(0.0), (ga, gb))
}

/// Squared MMD of every listed group against the pooled rest, at a fixed
/// bandwidth, sharing one kernel pass over the pooled rows.
///
/// `group[i]` is the group of row `i`. Returns the value for each entry of
/// `which` and the gradient of their sum with respect to every row. Each
/// value equals `mmd2` of the group against all other rows.
pub fn mmd2_one_vs_rest(
    pooled: &SampleMatrix,
    group: &[usize],
    which: &[usize],
    sigma: f64,
) -> Result<(Vec<f64>, SampleMatrix)> {
    if group.len() != pooled.n() {
        return Err(Error::DimensionMismatch {
            expected: pooled.n(),
            got: group.len(),
        });
    }
    let n_groups = group.iter().max().map_or(0, |g| g + 1);
    let mut sizes = vec![0usize; n_groups];
    group.iter().for_each(|&g| sizes[g] += 1);
    for &k in which {
        if k >= n_groups || sizes[k] == 0 || sizes[k] == pooled.n() {
            return Err(invalid(format!("group {k} needs rows on both sides")));
        }
    }
    let gamma = 1.0 / (2.0 * sigma * sigma);
    let inv_s2 = 1.0 / (sigma * sigma);
    let d = pooled.d();
    let at = atoms((0..pooled.n()).map(|i| pooled.row(i)));
    let u = at.points.len();
    // per-atom, per-group multiplicities
    let mut counts = vec![vec![0.0; n_groups]; u];
    for (&a, &g) in at.of_row.iter().zip(group) {
        counts[a][g] += 1.0;
    }
    let present: Vec<Vec<usize>> = counts
        .iter()
        .map(|c| (0..n_groups).filter(|&h| c[h] > 0.0).collect())
        .collect();

    // ksum[a][h] = sum over rows j in h of k(x_a, x_j); gsum likewise for
    // dk(x_a, x_j) / dx_a = -k (x_a - x_j) / sigma^2
    let mut ksum = vec![vec![0.0; n_groups]; u];
    let mut gsum = vec![vec![vec![0.0; d]; n_groups]; u];
    for a in 0..u {
        for b in 0..u {
            let (x, y) = (&at.points[a], &at.points[b]);
            let kv = (-gamma * sq_dist(x, y)).exp();
            for &h in &present[b] {
                let w = counts[b][h] * kv;
                ksum[a][h] += w;
                for (g, (p, q)) in gsum[a][h].iter_mut().zip(x.iter().zip(y)) {
                    *g -= w * inv_s2 * (p - q);
                }
            }
        }
    }
    let k_all: Vec<f64> = ksum.iter().map(|r| r.iter().sum()).collect();
    let g_all: Vec<Vec<f64>> = gsum
        .iter()
        .map(|r| (0..d).map(|c| r.iter().map(|v| v[c]).sum()).collect())
        .collect();
    let s_all: f64 = (0..u).map(|a| at.counts[a] as f64 * k_all[a]).sum();

    let total = pooled.n() as f64;
    let mut values = Vec::with_capacity(which.len());
    let mut grad = SampleMatrix::zeros(pooled.n(), d);
    for &k in which {
        let n = sizes[k] as f64;
        let m = total - n;
        let s_kk: f64 = (0..u).map(|a| counts[a][k] * ksum[a][k]).sum();
        let s_k_all: f64 = (0..u).map(|a| counts[a][k] * k_all[a]).sum();
        let v = s_kk / (n * n) + (s_all - 2.0 * s_k_all + s_kk) / (m * m)
            - 2.0 * (s_k_all - s_kk) / (n * m);
        values.push(v.max(0.0));
        for (i, (&a, &g)) in at.of_row.iter().zip(group).enumerate() {
            let (own, cross) = if g == k { (n, m) } else { (m, n) };
            for (c, out) in grad.row_mut(i).iter_mut().enumerate() {
                let inside = gsum[a][k][c];
                let rest = g_all[a][c] - inside;
                let (same, other) = if g == k {
                    (inside, rest)
                } else {
                    (rest, inside)
                };
                *out += 2.0 / (own * own) * same - 2.0 / (own * cross) * other;
            }
        }
    }
    Ok((values, grad))
}

/// Unbiased covariance `(X^T X - (1^T X)^T (1^T X) / n) / (n - 1)` and the
/// centred rows.
fn covariance(x: &SampleMatrix) -> (Vec<f64>, SampleMatrix) {
    let (n, d) = (x.n(), x.d());
    let mut mean = vec![0.0; d];
    for i in 0..n {
        for (m, v) in mean.iter_mut().zip(x.row(i)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let neg: Vec<f64> = mean.iter().map(|m| -m).collect();
    let centred = x.translated(&neg);
    let mut cov = vec![0.0; d * d];
    for i in 0..n {
        let r = centred.row(i);
        for p in 0..d {
            for q in 0..d {
                cov[p * d + q] += r[p] * r[q];
            }
        }
    }
    cov.iter_mut().for_each(|c| *c /= (n - 1) as f64);
    (cov, centred)
}

fn check_coral(a: &SampleMatrix, b: &SampleMatrix) -> Result<()> {
    check_dims(a, b)?;
    if a.n() < 2 || b.n() < 2 {
        return Err(invalid("CORAL needs at least two rows on each side"));
    }
    if a.d() == 0 {
        return Err(invalid("CORAL needs at least one column"));
    }
    Ok(())
}

pub fn coral(a: &SampleMatrix, b: &SampleMatrix) -> Result<f64> {
    check_coral(a, b)?;
    Ok(coral_value_and_grad(a, b).0)
}

pub fn grad_coral(a: &SampleMatrix, b: &SampleMatrix) -> Result<(SampleMatrix, SampleMatrix)> {
    check_coral(a, b)?;
    Ok(coral_value_and_grad(a, b).1)
}

fn coral_value_and_grad(a: &SampleMatrix, b: &SampleMatrix) -> (f64, (SampleMatrix, SampleMatrix)) {
    let d = a.d();
    let (ca, xa) = covariance(a);
    let (cb, xb) = covariance(b);
    let diff: Vec<f64> = ca.iter().zip(&cb).map(|(x, y)| x - y).collect();
    let scale = 1.0 / (d * d) as f64;
    let value = scale * diff.iter().map(|v| v * v).sum::<f64>();

    // dL/dX = 2/(n-1) * Xc * G with G = 2 (C_a - C_b) / d^2 (symmetric)
    let grad = |xc: &SampleMatrix, sign: f64| {
        let n = xc.n();
        let f = sign * 4.0 * scale / (n - 1) as f64;
        let mut g = SampleMatrix::zeros(n, d);
        for i in 0..n {
            let r = xc.row(i);
            for q in 0..d {
                let mut s = 0.0;
                for p in 0..d {
                    s += r[p] * diff[p * d + q];
                }
                g.data[i * d + q] = f * s;
            }
        }
        g
    };
    (value, (grad(&xa, 1.0), grad(&xb, -1.0)))
}

/// Penalty divergence selector.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Divergence {
    Mmd(KernelSpec),
    Coral,
}

impl Default for Divergence {
    fn default() -> Self {
        Divergence::Mmd(KernelSpec::median())
    }
}

impl Divergence {
    pub fn name(&self) -> &'static str {
        match self {
            Divergence::Mmd(_) => "mmd",
            Divergence::Coral => "coral",
        }
    }

    /// Minimum rows per side for the divergence to be defined.
    pub fn min_rows(&self) -> usize {
        match self {
            Divergence::Mmd(_) => 1,
            Divergence::Coral => 2,
        }
    }

    pub fn value(&self, a: &SampleMatrix, b: &SampleMatrix) -> Result<f64> {
        match self {
            Divergence::Mmd(k) => mmd2(a, b, k),
            Divergence::Coral => coral(a, b),
        }
    }

    /// Value and gradients; `sigma` overrides the kernel bandwidth for MMD.
    pub fn value_and_grad(
        &self,
        a: &SampleMatrix,
        b: &SampleMatrix,
        sigma: Option<f64>,
    ) -> Result<(f64, (SampleMatrix, SampleMatrix))> {
        match self {
            Divergence::Mmd(k) => {
                check_nonempty(a, b)?;
                let s = match sigma {
                    Some(s) => s,
                    None => k.resolve(a, b)?,
                };
                Ok(mmd2_value_and_grad(a, b, s))
            }
            Divergence::Coral => {
                check_coral(a, b)?;
                Ok(coral_value_and_grad(a, b))
            }
        }
    }
}
