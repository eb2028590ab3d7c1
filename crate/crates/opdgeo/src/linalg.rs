//! Dense real linear algebra: SVD, norms, rank-range reconstruction, and
//! principal-angle subspace similarity.
//!
//! `DenseMatrix` is the universal carrier for weights, weight deltas, and
//! Jacobian-like objects throughout the crate. Everything is `f64` internally;
//! the on-disk checkpoint format stores `f32` (see [`crate::store`]).
//!
//! All functions here are pure: no shared mutable state, safe to call from
//! multiple threads.

use nalgebra::DMatrix;
use thiserror::Error;

/// Sweep cap for the Jacobi SVD before declaring non-convergence; typical
/// convergence is well under 20 sweeps even at a few hundred columns.
const SVD_MAX_SWEEPS: usize = 60;

#[derive(Debug, Error)]
pub enum LinalgError {
    #[error("data length {len} does not match {rows}x{cols}")]
    BadLength { rows: usize, cols: usize, len: usize },
    #[error("non-finite entry at ({row}, {col})")]
    NonFinite { row: usize, col: usize },
    #[error("matrix must have at least one row and one column")]
    Empty,
    #[error("shape mismatch in {op}: {lhs_rows}x{lhs_cols} vs {rhs_rows}x{rhs_cols}")]
    ShapeMismatch {
        op: &'static str,
        lhs_rows: usize,
        lhs_cols: usize,
        rhs_rows: usize,
        rhs_cols: usize,
    },
    #[error("SVD did not converge for {rows}x{cols} matrix after {max_iter} iterations")]
    SvdNoConvergence { rows: usize, cols: usize, max_iter: usize },
    #[error("rank range {lo}..{hi} invalid for factorization of rank {rank}")]
    BadRankRange { lo: usize, hi: usize, rank: usize },
}

/// Row-major dense real matrix.
///
/// Invariants enforced on every construction path (including arithmetic):
/// `data.len() == rows * cols` and all entries finite.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, LinalgError> {
        if rows == 0 || cols == 0 {
            return Err(LinalgError::Empty);
        }
        if data.len() != rows * cols {
            return Err(LinalgError::BadLength { rows, cols, len: data.len() });
        }
        for (idx, v) in data.iter().enumerate() {
            if !v.is_finite() {
                return Err(LinalgError::NonFinite { row: idx / cols, col: idx % cols });
            }
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "zero-sized matrix");
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Square matrix with `d` on the diagonal.
    pub fn from_diag(d: &[f64]) -> Self {
        let n = d.len();
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = d[i];
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Result<Self, LinalgError> {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self::new(rows, cols, data)
    }

    /// Column vector from a slice.
    pub fn column_vector(v: &[f64]) -> Result<Self, LinalgError> {
        Self::new(v.len(), 1, v.to_vec())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn transpose(&self) -> Self {
        let mut data = vec![0.0; self.data.len()];
        for i in 0..self.rows {
            for j in 0..self.cols {
                data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        Self { rows: self.cols, cols: self.rows, data }
    }

    pub fn matmul(&self, rhs: &Self) -> Result<Self, LinalgError> {
        if self.cols != rhs.rows {
            return Err(LinalgError::ShapeMismatch {
                op: "matmul",
                lhs_rows: self.rows,
                lhs_cols: self.cols,
                rhs_rows: rhs.rows,
                rhs_cols: rhs.cols,
            });
        }
        let mut data = vec![0.0; self.rows * rhs.cols];
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let row = &rhs.data[k * rhs.cols..(k + 1) * rhs.cols];
                let out = &mut data[i * rhs.cols..(i + 1) * rhs.cols];
                for (o, &b) in out.iter_mut().zip(row) {
                    *o += a * b;
                }
            }
        }
        Self::new(self.rows, rhs.cols, data)
    }

    pub fn add(&self, rhs: &Self) -> Result<Self, LinalgError> {
        self.zip_with(rhs, "add", |a, b| a + b)
    }

    pub fn sub(&self, rhs: &Self) -> Result<Self, LinalgError> {
        self.zip_with(rhs, "sub", |a, b| a - b)
    }

    pub fn scale(&self, c: f64) -> Result<Self, LinalgError> {
        Self::new(self.rows, self.cols, self.data.iter().map(|v| v * c).collect())
    }

    fn zip_with(&self, rhs: &Self, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Self, LinalgError> {
        if self.rows != rhs.rows || self.cols != rhs.cols {
            return Err(LinalgError::ShapeMismatch {
                op,
                lhs_rows: self.rows,
                lhs_cols: self.cols,
                rhs_rows: rhs.rows,
                rhs_cols: rhs.cols,
            });
        }
        let data = self.data.iter().zip(&rhs.data).map(|(&a, &b)| f(a, b)).collect();
        Self::new(self.rows, self.cols, data)
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0)
    }

    /// Columns `lo..hi` as a new matrix.
    pub fn columns(&self, lo: usize, hi: usize) -> Self {
        assert!(lo < hi && hi <= self.cols, "column range out of bounds");
        let mut data = Vec::with_capacity(self.rows * (hi - lo));
        for i in 0..self.rows {
            data.extend_from_slice(&self.data[i * self.cols + lo..i * self.cols + hi]);
        }
        Self { rows: self.rows, cols: hi - lo, data }
    }

    pub fn max_abs_diff(&self, rhs: &Self) -> f64 {
        assert_eq!((self.rows, self.cols), (rhs.rows, rhs.cols));
        self.data
            .iter()
            .zip(&rhs.data)
            .map(|(&a, &b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub(crate) fn to_na(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.rows, self.cols, &self.data)
    }

}

/// Thin SVD of a matrix: `u * diag(sigma) * vt` reconstructs the input.
///
/// `sigma` is sorted non-increasing with `sigma.len() = min(rows, cols)`;
/// `u` has orthonormal columns and `vt` orthonormal rows. Sign conventions
/// are unconstrained: consumers must be sign-invariant (use
/// [`subspace_similarity`] rather than raw dot products when comparing
/// singular vectors across checkpoints).
#[derive(Debug, Clone)]
pub struct SvdFactors {
    pub u: DenseMatrix,
    pub sigma: Vec<f64>,
    pub vt: DenseMatrix,
}

impl SvdFactors {
    pub fn rank(&self) -> usize {
        self.sigma.len()
    }

    /// `u * diag(sigma) * vt`.
    pub fn reconstruct(&self) -> DenseMatrix {
        truncate_rank_range(self, 0, self.rank()).expect("full range is always valid")
    }
}

/// One-sided Jacobi (Hestenes) SVD.
///
/// Chosen over bidiagonalization-based drivers because it computes small
/// singular values of rank-deficient matrices to high relative accuracy —
/// weight-update deltas are frequently near-low-rank, exactly the regime
/// where QR-iteration SVDs can lose several digits.
pub fn svd(m: &DenseMatrix) -> Result<SvdFactors, LinalgError> {
    if m.rows() < m.cols() {
        let f = svd(&m.transpose())?;
        return Ok(SvdFactors { u: f.vt.transpose(), sigma: f.sigma, vt: f.u.transpose() });
    }
    let rows = m.rows();
    let n = m.cols();

    // Column-major working copies of A and V.
    let mut a: Vec<Vec<f64>> = (0..n).map(|j| (0..rows).map(|i| m.get(i, j)).collect()).collect();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|j| (0..n).map(|i| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();

    let dot = |x: &[f64], y: &[f64]| -> f64 { x.iter().zip(y).map(|(p, q)| p * q).sum() };
    let tol = (rows as f64).sqrt() * f64::EPSILON;
    // Columns driven below eps * ||A|| by a rotation are cancellation
    // residue: their direction is rounding noise, and rotating noise
    // against noise never converges. Flush them to exact zero.
    let zero_cut_sq =
        a.iter().map(|col| dot(col, col)).fold(0.0f64, f64::max) * f64::EPSILON * f64::EPSILON;
    let mut converged = false;
    for _sweep in 0..SVD_MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n.saturating_sub(1) {
            for q in (p + 1)..n {
                let (first, second) = a.split_at_mut(q);
                let cp = &mut first[p];
                let cq = &mut second[0];
                let alpha = dot(cp, cp);
                let beta = dot(cq, cq);
                let gamma = dot(cp, cq);
                // Separate square roots: alpha * beta can underflow.
                if alpha == 0.0 || beta == 0.0 || gamma.abs() <= tol * alpha.sqrt() * beta.sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for i in 0..rows {
                    let xp = cp[i];
                    let xq = cq[i];
                    cp[i] = c * xp - s * xq;
                    cq[i] = s * xp + c * xq;
                }
                if dot(cp, cp) <= zero_cut_sq {
                    cp.fill(0.0);
                }
                if dot(cq, cq) <= zero_cut_sq {
                    cq.fill(0.0);
                }
                let (vf, vs) = v.split_at_mut(q);
                let vp = &mut vf[p];
                let vq = &mut vs[0];
                for i in 0..n {
                    let xp = vp[i];
                    let xq = vq[i];
                    vp[i] = c * xp - s * xq;
                    vq[i] = s * xp + c * xq;
                }
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(LinalgError::SvdNoConvergence { rows, cols: n, max_iter: SVD_MAX_SWEEPS });
    }

    // Singular values are the column norms; sort descending.
    let mut order: Vec<usize> = (0..n).collect();
    let norms: Vec<f64> = a.iter().map(|col| dot(col, col).sqrt()).collect();
    order.sort_by(|&i, &j| norms[j].partial_cmp(&norms[i]).expect("finite norms"));
    let sigma: Vec<f64> = order.iter().map(|&j| norms[j]).collect();

    let mut u_cols: Vec<Vec<f64>> = Vec::with_capacity(n);
    for (rank_pos, &j) in order.iter().enumerate() {
        let s = sigma[rank_pos];
        if s > f64::MIN_POSITIVE * rows as f64 {
            u_cols.push(a[j].iter().map(|x| x / s).collect());
        } else {
            // Zero singular value: complete U with any unit vector orthogonal
            // to the columns already placed.
            let mut picked = None;
            for e in 0..rows {
                let mut cand = vec![0.0; rows];
                cand[e] = 1.0;
                for _ in 0..2 {
                    for uc in &u_cols {
                        let proj = dot(&cand, uc);
                        for (ci, ui) in cand.iter_mut().zip(uc) {
                            *ci -= proj * ui;
                        }
                    }
                }
                let nrm = dot(&cand, &cand).sqrt();
                if nrm > 1e-3 {
                    for ci in cand.iter_mut() {
                        *ci /= nrm;
                    }
                    picked = Some(cand);
                    break;
                }
            }
            u_cols.push(picked.expect("orthonormal completion always exists for rows >= cols"));
        }
    }

    let u = DenseMatrix::from_fn(rows, n, |i, j| u_cols[j][i])?;
    let vt = DenseMatrix::from_fn(n, n, |i, j| v[order[i]][j])?;
    Ok(SvdFactors { u, sigma, vt })
}

/// Moore-Penrose pseudo-inverse: singular values at or below
/// `rel_eps * sigma_max` are treated as zero.
pub fn pseudo_inverse(m: &DenseMatrix, rel_eps: f64) -> Result<DenseMatrix, LinalgError> {
    let f = svd(m)?;
    let cut = rel_eps * f.sigma.first().copied().unwrap_or(0.0);
    // V * diag(1/sigma on support) * U^T, assembled directly.
    let mut data = vec![0.0; m.cols() * m.rows()];
    for (k, &s) in f.sigma.iter().enumerate() {
        if s <= cut || s == 0.0 {
            continue;
        }
        let inv = 1.0 / s;
        for i in 0..m.cols() {
            let vik = f.vt.get(k, i) * inv;
            if vik == 0.0 {
                continue;
            }
            let out = &mut data[i * m.rows()..(i + 1) * m.rows()];
            for (j, o) in out.iter_mut().enumerate() {
                *o += vik * f.u.get(j, k);
            }
        }
    }
    DenseMatrix::new(m.cols(), m.rows(), data)
}

/// Largest singular value.
pub fn spectral_norm(m: &DenseMatrix) -> Result<f64, LinalgError> {
    Ok(svd(m)?.sigma.first().copied().unwrap_or(0.0))
}

pub fn frobenius_norm(m: &DenseMatrix) -> f64 {
    m.frobenius_norm()
}

/// Partial reconstruction from singular components `lo..hi`:
/// sum over i in [lo, hi) of `sigma[i] * u_i * v_i^T`.
pub fn truncate_rank_range(f: &SvdFactors, lo: usize, hi: usize) -> Result<DenseMatrix, LinalgError> {
    if lo >= hi || hi > f.rank() {
        return Err(LinalgError::BadRankRange { lo, hi, rank: f.rank() });
    }
    let rows = f.u.rows();
    let cols = f.vt.cols();
    let mut data = vec![0.0; rows * cols];
    for k in lo..hi {
        let s = f.sigma[k];
        if s == 0.0 {
            continue;
        }
        for i in 0..rows {
            let us = s * f.u.get(i, k);
            if us == 0.0 {
                continue;
            }
            let vrow = f.vt.row(k);
            let out = &mut data[i * cols..(i + 1) * cols];
            for (o, &v) in out.iter_mut().zip(vrow) {
                *o += us * v;
            }
        }
    }
    DenseMatrix::new(rows, cols, data)
}

/// Mean cosine of the principal angles between the column spans of `a` and
/// `b`: the mean singular value of `a^T b`, in `[0, 1]`.
///
/// Both inputs must have orthonormal columns of the same shape. The result
/// is symmetric in its arguments and invariant to per-column sign flips.
pub fn subspace_similarity(a: &DenseMatrix, b: &DenseMatrix) -> Result<f64, LinalgError> {
    if a.rows() != b.rows() || a.cols() != b.cols() {
        return Err(LinalgError::ShapeMismatch {
            op: "subspace_similarity",
            lhs_rows: a.rows(),
            lhs_cols: a.cols(),
            rhs_rows: b.rows(),
            rhs_cols: b.cols(),
        });
    }
    let prod = a.transpose().matmul(b)?;
    let f = svd(&prod)?;
    // Cosines can overshoot 1 by rounding; clamp before averaging.
    let k = f.sigma.len() as f64;
    Ok(f.sigma.iter().map(|s| s.clamp(0.0, 1.0)).sum::<f64>() / k)
}
