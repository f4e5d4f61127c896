//! Dense real linear algebra.
//!
//! Everything here works on row-major `f64` matrices. The SVD is a one-sided
//! (Hestenes) Jacobi iteration, which is slow for large inputs but accurate
//! to working precision for the layer sizes this crate handles, and fully
//! deterministic: the same input bits give the same factor bits.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};

/// Default relative tolerance for [`numerical_rank`].
pub const DEFAULT_RANK_TOL: f64 = 1e-12;

/// Default epsilon for the ε-rank.
pub const DEFAULT_EPS_RANK: f64 = 0.01;

const JACOBI_EPS: f64 = 1e-15;
const MAX_SWEEPS: usize = 100;

/// Row-major dense matrix with finite entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawMatrix", into = "RawMatrix")]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct RawMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl TryFrom<RawMatrix> for Matrix {
    type Error = Error;

    fn try_from(raw: RawMatrix) -> Result<Self> {
        Matrix::new(raw.rows, raw.cols, raw.data)
    }
}

impl From<Matrix> for RawMatrix {
    fn from(m: Matrix) -> Self {
        RawMatrix {
            rows: m.rows,
            cols: m.cols,
            data: m.data,
        }
    }
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(shape_err(
                "Matrix::new",
                format!("{} entries for {rows}x{cols}", rows * cols),
                data.len(),
            ));
        }
        if let Some(pos) = data.iter().position(|x| !x.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "non-finite entry at ({}, {})",
                pos / cols.max(1),
                pos % cols.max(1)
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub(crate) fn from_raw(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Self { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::from_raw(rows, cols, vec![0.0; rows * cols])
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != cols) {
            return Err(shape_err("Matrix::from_rows", cols, bad.len()));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self::from_raw(rows, cols, data)
    }

    pub fn diag(values: &[f64]) -> Self {
        let n = values.len();
        let mut m = Self::zeros(n, n);
        for (i, &v) in values.iter().enumerate() {
            m.data[i * n + i] = v;
        }
        m
    }

    /// `a bᵀ`.
    pub fn outer(a: &[f64], b: &[f64]) -> Self {
        Self::from_fn(a.len(), b.len(), |i, j| a[i] * b[j])
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, value: f64) {
        self.data[i * self.cols + j] = value;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn col(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(shape_err(
                "matmul",
                format!("{} rows on the right", self.cols),
                format!("{}x{}", other.rows, other.cols),
            ));
        }
        let mut out = vec![0.0; self.rows * other.cols];
        for i in 0..self.rows {
            let out_row = &mut out[i * other.cols..(i + 1) * other.cols];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                for (o, &b) in out_row.iter_mut().zip(other.row(k)) {
                    *o += a * b;
                }
            }
        }
        Ok(Matrix::from_raw(self.rows, other.cols, out))
    }

    /// `self · x`.
    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.cols {
            return Err(shape_err("matvec", self.cols, x.len()));
        }
        Ok((0..self.rows).map(|i| dot(self.row(i), x)).collect())
    }

    /// `selfᵀ · y`.
    pub fn tr_matvec(&self, y: &[f64]) -> Result<Vec<f64>> {
        if y.len() != self.rows {
            return Err(shape_err("tr_matvec", self.rows, y.len()));
        }
        let mut out = vec![0.0; self.cols];
        for (i, &yi) in y.iter().enumerate() {
            for (o, &w) in out.iter_mut().zip(self.row(i)) {
                *o += w * yi;
            }
        }
        Ok(out)
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        let mut out = self.clone();
        out.add_assign(other)?;
        Ok(out)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.check_same_shape("sub", other)?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        Ok(Matrix::from_raw(self.rows, self.cols, data))
    }

    pub fn add_assign(&mut self, other: &Matrix) -> Result<()> {
        self.check_same_shape("add", other)?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&self, c: f64) -> Matrix {
        Matrix::from_raw(self.rows, self.cols, self.data.iter().map(|x| x * c).collect())
    }

    pub fn frobenius(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    /// Largest singular value.
    pub fn spectral_norm(&self) -> Result<f64> {
        Ok(svd(self)?.sigma.first().copied().unwrap_or(0.0))
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> Result<f64> {
        self.check_same_shape("max_abs_diff", other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    fn check_same_shape(&self, op: &'static str, other: &Matrix) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(shape_err(
                op,
                format!("{}x{}", self.rows, self.cols),
                format!("{}x{}", other.rows, other.cols),
            ));
        }
        Ok(())
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `‖M‖_F`.
pub fn frobenius(m: &Matrix) -> f64 {
    m.frobenius()
}

/// Thin SVD factors `U · diag(sigma) · Vᵀ`.
///
/// `u` is `d × p`, `v` is `k × p`, and `sigma` is nonincreasing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SvdFactors {
    pub u: Matrix,
    pub sigma: Vec<f64>,
    pub v: Matrix,
}

impl SvdFactors {
    /// Number of singular triplets held.
    pub fn width(&self) -> usize {
        self.sigma.len()
    }

    pub fn reconstruct(&self) -> Matrix {
        let (d, p) = self.u.shape();
        let k = self.v.rows();
        Matrix::from_fn(d, k, |i, j| {
            (0..p)
                .map(|c| self.u.get(i, c) * self.sigma[c] * self.v.get(j, c))
                .sum()
        })
    }
}

/// Full thin SVD, `p = min(rows, cols)`.
///
/// Sign convention: the largest-magnitude entry of every column of `U` is
/// positive (first such entry on ties), with `V` flipped to match.
pub fn svd(w: &Matrix) -> Result<SvdFactors> {
    let (rows, cols) = w.shape();
    if rows == 0 || cols == 0 {
        return Err(Error::InvalidInput(format!("svd of empty {rows}x{cols} matrix")));
    }
    if w.data.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidInput("svd of matrix with non-finite entries".into()));
    }
    let mut f = if rows >= cols {
        jacobi_tall(w)?
    } else {
        let t = jacobi_tall(&w.transpose())?;
        SvdFactors {
            u: t.v,
            sigma: t.sigma,
            v: t.u,
        }
    };
    fix_signs(&mut f);
    Ok(f)
}

/// One-sided Jacobi on a matrix with `rows >= cols`.
fn jacobi_tall(w: &Matrix) -> Result<SvdFactors> {
    let (m, n) = w.shape();
    // column-major working copies
    let mut a: Vec<Vec<f64>> = (0..n).map(|j| w.col(j)).collect();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|j| {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            e
        })
        .collect();

    let mut converged = n < 2;
    for _ in 0..MAX_SWEEPS {
        if converged {
            break;
        }
        let mut rotated = false;
        for i in 0..n - 1 {
            for j in i + 1..n {
                let alpha = dot(&a[i], &a[i]);
                let beta = dot(&a[j], &a[j]);
                let gamma = dot(&a[i], &a[j]);
                if gamma == 0.0 || gamma.abs() <= JACOBI_EPS * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate_pair(&mut a, i, j, c, s);
                rotate_pair(&mut v, i, j, c, s);
            }
        }
        converged = !rotated;
    }
    if !converged {
        return Err(Error::Numerical {
            rows: m,
            cols: n,
            sweeps: MAX_SWEEPS,
        });
    }

    let norms: Vec<f64> = a.iter().map(|c| norm2(c)).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| norms[y].total_cmp(&norms[x]).then(x.cmp(&y)));

    let mut u_cols: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut sigma = Vec::with_capacity(n);
    let mut v_cols = Vec::with_capacity(n);
    let mut pending = Vec::new();
    for &j in &order {
        let s = norms[j];
        sigma.push(s);
        v_cols.push(v[j].clone());
        if s > 0.0 {
            u_cols.push(a[j].iter().map(|x| x / s).collect());
        } else {
            pending.push(u_cols.len());
            u_cols.push(vec![0.0; m]);
        }
    }
    for slot in pending {
        u_cols[slot] = orthonormal_completion(&u_cols, slot, m);
    }

    Ok(SvdFactors {
        u: columns_to_matrix(&u_cols, m),
        sigma,
        v: columns_to_matrix(&v_cols, n),
    })
}

fn rotate_pair(cols: &mut [Vec<f64>], i: usize, j: usize, c: f64, s: f64) {
    let (lo, hi) = cols.split_at_mut(j);
    let (ci, cj) = (&mut lo[i], &mut hi[0]);
    for (x, y) in ci.iter_mut().zip(cj.iter_mut()) {
        let (xi, yj) = (*x, *y);
        *x = c * xi - s * yj;
        *y = s * xi + c * yj;
    }
}

/// A unit vector orthogonal to every column of `cols` except `skip` and
/// the not-yet-filled zero columns.
fn orthonormal_completion(cols: &[Vec<f64>], skip: usize, m: usize) -> Vec<f64> {
    let basis: Vec<&Vec<f64>> = cols
        .iter()
        .enumerate()
        .filter(|(idx, c)| *idx != skip && c.iter().any(|x| *x != 0.0))
        .map(|(_, c)| c)
        .collect();
    let mut best: Option<(f64, Vec<f64>)> = None;
    for e in 0..m {
        let mut cand = vec![0.0; m];
        cand[e] = 1.0;
        for _ in 0..2 {
            for b in &basis {
                let proj = dot(&cand, b);
                for (c, bv) in cand.iter_mut().zip(b.iter()) {
                    *c -= proj * bv;
                }
            }
        }
        let n = norm2(&cand);
        if best.as_ref().is_none_or(|(bn, _)| n > *bn + 1e-12) {
            best = Some((n, cand));
        }
    }
    let (n, mut cand) = best.expect("m >= 1");
    for c in &mut cand {
        *c /= n;
    }
    cand
}

fn columns_to_matrix(cols: &[Vec<f64>], rows: usize) -> Matrix {
    Matrix::from_fn(rows, cols.len(), |i, j| cols[j][i])
}

fn fix_signs(f: &mut SvdFactors) {
    let (d, p) = f.u.shape();
    let k = f.v.rows();
    for c in 0..p {
        let mut arg = 0;
        for i in 1..d {
            if f.u.get(i, c).abs() > f.u.get(arg, c).abs() {
                arg = i;
            }
        }
        if f.u.get(arg, c) < 0.0 {
            for i in 0..d {
                let x = f.u.get(i, c);
                f.u.set(i, c, -x);
            }
            for i in 0..k {
                let x = f.v.get(i, c);
                f.v.set(i, c, -x);
            }
        }
    }
}

/// Columns `offset..offset + r` of the factors.
pub fn truncate(f: &SvdFactors, offset: usize, r: usize) -> Result<SvdFactors> {
    let p = f.width();
    if offset + r > p {
        return Err(Error::Range {
            offset,
            width: r,
            available: p,
        });
    }
    let pick = |m: &Matrix| Matrix::from_fn(m.rows(), r, |i, j| m.get(i, offset + j));
    Ok(SvdFactors {
        u: pick(&f.u),
        sigma: f.sigma[offset..offset + r].to_vec(),
        v: pick(&f.v),
    })
}

/// Effective-rank diagnostics of a matrix.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankMeasures {
    /// `(Σσ)² / Σσ²`; zero for the zero matrix.
    pub participation_ratio: f64,
    /// Count of singular values above `epsilon · σ₁`.
    pub eps_rank: usize,
    pub epsilon: f64,
    pub frobenius_norm: f64,
}

impl RankMeasures {
    pub fn zero(epsilon: f64) -> Self {
        Self {
            participation_ratio: 0.0,
            eps_rank: 0,
            epsilon,
            frobenius_norm: 0.0,
        }
    }
}

pub fn rank_measures(m: &Matrix, epsilon: f64) -> Result<RankMeasures> {
    let sigma = svd(m)?.sigma;
    rank_measures_from_sigma(&sigma, epsilon)
}

/// Same as [`rank_measures`] for an already-computed spectrum.
pub fn rank_measures_from_sigma(sigma: &[f64], epsilon: f64) -> Result<RankMeasures> {
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(Error::OutOfRange(format!("epsilon {epsilon} (must lie in (0, 1))")));
    }
    let top = sigma.iter().copied().fold(0.0, f64::max);
    if top == 0.0 {
        return Ok(RankMeasures::zero(epsilon));
    }
    let sum: f64 = sigma.iter().sum();
    let sum_sq: f64 = sigma.iter().map(|s| s * s).sum();
    Ok(RankMeasures {
        participation_ratio: sum * sum / sum_sq,
        eps_rank: sigma.iter().filter(|&&s| s > epsilon * top).count(),
        epsilon,
        frobenius_norm: sum_sq.sqrt(),
    })
}

/// Machine-rank: singular values above `tol · σ₁ · max(rows, cols)`.
pub fn numerical_rank(m: &Matrix, tol: f64) -> Result<usize> {
    if tol <= 0.0 {
        return Err(Error::OutOfRange(format!("rank tolerance {tol}")));
    }
    let sigma = svd(m)?.sigma;
    let top = sigma.first().copied().unwrap_or(0.0);
    if top == 0.0 {
        return Ok(0);
    }
    let cutoff = tol * top * m.rows().max(m.cols()) as f64;
    Ok(sigma.iter().filter(|&&s| s > cutoff).count())
}
