//! Dense row-major `f64` matrices, Frobenius geometry and a thin SVD.
//!
//! The SVD is a one-sided (Hestenes) Jacobi iteration. Tall inputs are first
//! reduced with a Householder QR so the rotations act on the small square
//! triangular factor; wide inputs are handled through their transpose.

use std::fmt;
use std::ops::{Index, IndexMut};

use crate::error::{Error, Result};

/// Maximum number of Jacobi sweeps before giving up.
pub const SVD_MAX_SWEEPS: usize = 60;
/// A column pair is rotated while `|<p,q>| > SVD_TOLERANCE * |p| |q|`.
pub const SVD_TOLERANCE: f64 = 1e-12;
/// Singular values below this fraction of the largest count as zero for rank decisions.
pub const RANK_TOLERANCE: f64 = 1e-12;

#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Matrix({}x{})", self.rows, self.cols)?;
        if self.data.len() <= 36 {
            for r in 0..self.rows {
                write!(f, "\n  {:?}", self.row(r))?;
            }
        }
        Ok(())
    }
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Contract(format!(
                "matrix data has {} entries, expected {rows}x{cols}",
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Builds a matrix from nested rows. Panics on ragged input; meant for literals.
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Matrix {
            rows: rows.len(),
            cols,
            data,
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Matrix { rows, cols, data }
    }

    pub fn diag(values: &[f64]) -> Self {
        let mut m = Matrix::zeros(values.len(), values.len());
        for (i, &v) in values.iter().enumerate() {
            m[(i, i)] = v;
        }
        m
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        t
    }

    fn check_same_shape(&self, other: &Matrix, op: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch {
                op,
                left: self.shape(),
                right: other.shape(),
            });
        }
        Ok(())
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.check_same_shape(other, "add")?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Ok(Matrix { data, ..*self })
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.check_same_shape(other, "sub")?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        Ok(Matrix { data, ..*self })
    }

    pub fn scale(&self, factor: f64) -> Matrix {
        Matrix {
            data: self.data.iter().map(|v| v * factor).collect(),
            ..*self
        }
    }

    /// `self += alpha * other`
    pub fn axpy(&mut self, alpha: f64, other: &Matrix) -> Result<()> {
        self.check_same_shape(other, "axpy")?;
        for (s, o) in self.data.iter_mut().zip(&other.data) {
            *s += alpha * o;
        }
        Ok(())
    }

    /// Entrywise mean of equally shaped matrices.
    pub fn mean_of<'a>(items: impl IntoIterator<Item = &'a Matrix>) -> Result<Matrix> {
        let mut iter = items.into_iter();
        let first = iter
            .next()
            .ok_or_else(|| Error::Contract("mean of an empty matrix list".into()))?;
        let mut acc = first.clone();
        let mut count = 1usize;
        for m in iter {
            acc.axpy(1.0, m)?;
            count += 1;
        }
        let inv = 1.0 / count as f64;
        acc.data.iter_mut().for_each(|v| *v *= inv);
        Ok(acc)
    }

    /// Columns `[0, k)`.
    pub fn leading_cols(&self, k: usize) -> Matrix {
        Matrix::from_fn(self.rows, k, |r, c| self[(r, c)])
    }

    /// Rows `[0, k)`.
    pub fn leading_rows(&self, k: usize) -> Matrix {
        Matrix {
            rows: k,
            cols: self.cols,
            data: self.data[..k * self.cols].to_vec(),
        }
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;

    #[inline]
    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &self.data[r * self.cols + c]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    #[inline]
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &mut self.data[r * self.cols + c]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Op {
    N,
    T,
}

impl Op {
    fn dims(self, m: &Matrix) -> (usize, usize) {
        match self {
            Op::N => (m.rows, m.cols),
            Op::T => (m.cols, m.rows),
        }
    }

    /// (row stride, col stride) of `op(m)` over `m`'s row-major buffer.
    fn strides(self, m: &Matrix) -> (isize, isize) {
        match self {
            Op::N => (m.cols as isize, 1),
            Op::T => (1, m.cols as isize),
        }
    }
}

/// `c = alpha * op(a) * op(b) + beta * c`
pub fn gemm(alpha: f64, a: &Matrix, op_a: Op, b: &Matrix, op_b: Op, beta: f64, c: &mut Matrix) -> Result<()> {
    let (m, k) = op_a.dims(a);
    let (kb, n) = op_b.dims(b);
    if k != kb {
        return Err(Error::ShapeMismatch {
            op: "matmul",
            left: (m, k),
            right: (kb, n),
        });
    }
    if c.shape() != (m, n) {
        return Err(Error::ShapeMismatch {
            op: "matmul output",
            left: (m, n),
            right: c.shape(),
        });
    }
    if m == 0 || n == 0 {
        return Ok(());
    }
    if k == 0 {
        c.data.iter_mut().for_each(|v| *v *= beta);
        return Ok(());
    }
    let (rsa, csa) = op_a.strides(a);
    let (rsb, csb) = op_b.strides(b);
    // SAFETY: strides and extents describe exactly the buffers of `a`, `b`
    // and `c`, whose shapes were validated above; `c` is uniquely borrowed.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            c.data.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    debug_assert!(c.is_finite(), "non-finite gemm output");
    Ok(())
}

pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    product(a, Op::N, b, Op::N)
}

/// `aᵀ b`
pub fn matmul_tn(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    product(a, Op::T, b, Op::N)
}

/// `a bᵀ`
pub fn matmul_nt(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    product(a, Op::N, b, Op::T)
}

fn product(a: &Matrix, op_a: Op, b: &Matrix, op_b: Op) -> Result<Matrix> {
    let mut c = Matrix::zeros(op_a.dims(a).0, op_b.dims(b).1);
    gemm(1.0, a, op_a, b, op_b, 0.0, &mut c)?;
    Ok(c)
}

pub fn frobenius_inner(a: &Matrix, b: &Matrix) -> Result<f64> {
    a.check_same_shape(b, "frobenius_inner")?;
    Ok(dot(&a.data, &b.data))
}

pub fn frobenius_norm_sq(m: &Matrix) -> f64 {
    dot(&m.data, &m.data)
}

pub fn frobenius_norm(m: &Matrix) -> f64 {
    frobenius_norm_sq(m).sqrt()
}

/// `‖a − b‖_F²` without allocating the difference.
pub fn frobenius_dist_sq(a: &Matrix, b: &Matrix) -> Result<f64> {
    a.check_same_shape(b, "frobenius_dist_sq")?;
    Ok(a.data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| (x - y) * (x - y))
        .sum())
}

#[inline]
pub(crate) fn dot(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| a * b).sum()
}

#[derive(Clone, Debug)]
pub struct SvdResult {
    /// d×k, orthonormal columns
    pub u: Matrix,
    /// k values, non-increasing
    pub sigma: Vec<f64>,
    /// k×n, orthonormal rows
    pub vt: Matrix,
    /// Jacobi sweeps used.
    pub sweeps: usize,
}

impl SvdResult {
    pub fn reconstruct(&self) -> Matrix {
        let mut us = self.u.clone();
        for r in 0..us.rows {
            for (v, s) in us.row_mut(r).iter_mut().zip(&self.sigma) {
                *v *= s;
            }
        }
        matmul(&us, &self.vt).expect("svd factors are conformable")
    }

    /// Number of singular values above `RANK_TOLERANCE * sigma_max`.
    pub fn numeric_rank(&self) -> usize {
        let max = self.sigma.first().copied().unwrap_or(0.0);
        if max == 0.0 {
            return 0;
        }
        self.sigma.iter().filter(|&&s| s > RANK_TOLERANCE * max).count()
    }

    /// `Σ_{k>r} σ_k²`, the energy discarded by a rank-r truncation.
    pub fn tail_energy(&self, r: usize) -> f64 {
        self.sigma.iter().skip(r).map(|s| s * s).sum()
    }
}

/// Thin SVD `m = u · diag(sigma) · vt` with `k = min(rows, cols)`.
pub fn svd(m: &Matrix) -> Result<SvdResult> {
    if m.rows == 0 || m.cols == 0 {
        return Err(Error::Contract(format!("svd of empty {}x{} matrix", m.rows, m.cols)));
    }
    if m.rows >= m.cols {
        svd_tall(m)
    } else {
        let t = svd_tall(&m.transpose())?;
        Ok(SvdResult {
            u: t.vt.transpose(),
            sigma: t.sigma,
            vt: t.u.transpose(),
            sweeps: t.sweeps,
        })
    }
}

/// Rank-r factors `(u[:, :r] diag(σ[:r]), vt[:r, :])`.
pub fn truncate_svd(s: &SvdResult, r: usize) -> Result<(Matrix, Matrix)> {
    let k = s.sigma.len();
    if r == 0 || r > k {
        return Err(Error::Contract(format!("truncation rank {r} outside 1..={k}")));
    }
    let mut b = s.u.leading_cols(r);
    for row in 0..b.rows {
        for (v, sigma) in b.row_mut(row).iter_mut().zip(&s.sigma[..r]) {
            *v *= sigma;
        }
    }
    Ok((b, s.vt.leading_rows(r)))
}

/// Householder QR of a tall `d×n` matrix. Returns the thin `q` (d×n) and `r` (n×n).
fn householder_qr(m: &Matrix) -> (Matrix, Matrix) {
    let (d, n) = m.shape();
    // Work column-major: column j is `work[j*d..(j+1)*d]`.
    let mut work = m.transpose().into_vec();
    let mut reflectors: Vec<Vec<f64>> = Vec::with_capacity(n);
    for j in 0..n {
        let col = &work[j * d..(j + 1) * d];
        let norm = dot(&col[j..], &col[j..]).sqrt();
        let mut v = col[j..].to_vec();
        if norm == 0.0 {
            reflectors.push(v.iter().map(|_| 0.0).collect());
            continue;
        }
        let alpha = if v[0] >= 0.0 { -norm } else { norm };
        v[0] -= alpha;
        let vnorm = dot(&v, &v).sqrt();
        if vnorm == 0.0 {
            reflectors.push(vec![0.0; v.len()]);
            continue;
        }
        v.iter_mut().for_each(|x| *x /= vnorm);
        for c in j..n {
            let tail = &mut work[c * d + j..(c + 1) * d];
            let proj = 2.0 * dot(&v, tail);
            for (t, vi) in tail.iter_mut().zip(&v) {
                *t -= proj * vi;
            }
        }
        reflectors.push(v);
    }
    let r = Matrix::from_fn(n, n, |i, j| if i <= j { work[j * d + i] } else { 0.0 });

    // Accumulate q = H_0 H_1 … H_{n-1} applied to the first n unit columns.
    let mut q_cols = vec![0.0; n * d];
    for j in 0..n {
        q_cols[j * d + j] = 1.0;
    }
    for (j, v) in reflectors.iter().enumerate().rev() {
        for c in 0..n {
            let tail = &mut q_cols[c * d + j..(c + 1) * d];
            let proj = 2.0 * dot(v, tail);
            if proj != 0.0 {
                for (t, vi) in tail.iter_mut().zip(v) {
                    *t -= proj * vi;
                }
            }
        }
    }
    let q = Matrix {
        rows: n,
        cols: d,
        data: q_cols,
    }
    .transpose();
    (q, r)
}

fn svd_tall(m: &Matrix) -> Result<SvdResult> {
    let (d, n) = m.shape();
    let (q, r) = householder_qr(m);

    // cols[j] is column j of the iterate R·V; vcols[j] is column j of V.
    let mut cols = r.transpose().into_vec();
    let mut vcols = Matrix::identity(n).into_vec();
    let mut norms: Vec<f64> = (0..n).map(|j| dot(&cols[j * n..(j + 1) * n], &cols[j * n..(j + 1) * n])).collect();

    let mut sweeps = 0;
    let mut residual = 0.0;
    let mut converged = n < 2;
    while !converged && sweeps < SVD_MAX_SWEEPS {
        sweeps += 1;
        residual = 0.0f64;
        let mut rotated = false;
        for p in 0..n - 1 {
            for qi in p + 1..n {
                let (head, tail) = cols.split_at_mut(qi * n);
                let cp = &mut head[p * n..(p + 1) * n];
                let cq = &mut tail[..n];
                let alpha = norms[p];
                let beta = norms[qi];
                if alpha == 0.0 || beta == 0.0 {
                    continue;
                }
                let gamma = dot(cp, cq);
                let off = gamma.abs() / (alpha * beta).sqrt();
                residual = residual.max(off);
                if off <= SVD_TOLERANCE {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(cp, cq, c, s);
                let (vhead, vtail) = vcols.split_at_mut(qi * n);
                rotate(&mut vhead[p * n..(p + 1) * n], &mut vtail[..n], c, s);
                norms[p] = alpha - t * gamma;
                norms[qi] = beta + t * gamma;
            }
        }
        // Refresh the tracked norms to stop drift from the incremental updates.
        for (j, nj) in norms.iter_mut().enumerate() {
            let col = &cols[j * n..(j + 1) * n];
            *nj = dot(col, col);
        }
        converged = !rotated;
    }
    if !converged {
        return Err(Error::SvdNoConvergence { sweeps, residual });
    }

    let mut order: Vec<usize> = (0..n).collect();
    let sig: Vec<f64> = norms.iter().map(|v| v.sqrt()).collect();
    order.sort_by(|&a, &b| sig[b].total_cmp(&sig[a]).then(a.cmp(&b)));
    let sigma: Vec<f64> = order.iter().map(|&j| sig[j]).collect();
    let smax = sigma[0];

    // Left vectors of R (column-major, n×n); null directions completed below.
    let mut ur = vec![0.0; n * n];
    let mut filled = vec![false; n];
    for (k, &j) in order.iter().enumerate() {
        let s = sig[j];
        if s > 0.0 && s > RANK_TOLERANCE * smax * 1e-2 {
            for (dst, src) in ur[k * n..(k + 1) * n].iter_mut().zip(&cols[j * n..(j + 1) * n]) {
                *dst = src / s;
            }
            filled[k] = true;
        }
    }
    complete_orthonormal(&mut ur, &filled, n);

    let ur_mat = Matrix {
        rows: n,
        cols: n,
        data: ur,
    }
    .transpose();
    let u = matmul(&q, &ur_mat)?;
    let vt = Matrix::from_fn(n, n, |k, c| vcols[order[k] * n + c]);
    debug_assert_eq!(u.shape(), (d, n));
    Ok(SvdResult { u, sigma, vt, sweeps })
}

#[inline]
fn rotate(p: &mut [f64], q: &mut [f64], c: f64, s: f64) {
    for (x, y) in p.iter_mut().zip(q.iter_mut()) {
        let (a, b) = (*x, *y);
        *x = c * a - s * b;
        *y = s * a + c * b;
    }
}

/// Replaces the unfilled columns of a column-major `n×n` buffer with unit
/// vectors orthogonal to every other column (modified Gram–Schmidt, twice).
fn complete_orthonormal(cols: &mut [f64], filled: &[bool], n: usize) {
    let mut candidate = 0usize;
    for k in 0..n {
        if filled[k] {
            continue;
        }
        loop {
            assert!(candidate < n, "ran out of basis candidates");
            let mut v = vec![0.0; n];
            v[candidate] = 1.0;
            candidate += 1;
            for _ in 0..2 {
                for j in 0..n {
                    if j == k || (!filled[j] && j > k) {
                        continue;
                    }
                    let cj = &cols[j * n..(j + 1) * n];
                    let proj = dot(cj, &v);
                    for (vi, c) in v.iter_mut().zip(cj) {
                        *vi -= proj * c;
                    }
                }
            }
            let norm = dot(&v, &v).sqrt();
            if norm > 1e-6 {
                for (dst, vi) in cols[k * n..(k + 1) * n].iter_mut().zip(&v) {
                    *dst = vi / norm;
                }
                break;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    fn naive_matmul(a: &Matrix, b: &Matrix) -> Matrix {
        Matrix::from_fn(a.rows(), b.cols(), |i, j| (0..a.cols()).map(|k| a[(i, k)] * b[(k, j)]).sum())
    }

    /// Eigenvalues of a symmetric matrix by classical cyclic Jacobi.
    fn sym_eigenvalues(s: &Matrix) -> Vec<f64> {
        let n = s.rows();
        let mut a = s.clone();
        for _ in 0..100 {
            let off: f64 = (0..n)
                .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
                .map(|(i, j)| a[(i, j)] * a[(i, j)])
                .sum();
            if off < 1e-30 {
                break;
            }
            for p in 0..n {
                for q in p + 1..n {
                    if a[(p, q)].abs() < 1e-300 {
                        continue;
                    }
                    let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * a[(p, q)]);
                    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                    let c = 1.0 / (t * t + 1.0).sqrt();
                    let s_ = t * c;
                    for k in 0..n {
                        let akp = a[(k, p)];
                        let akq = a[(k, q)];
                        a[(k, p)] = c * akp - s_ * akq;
                        a[(k, q)] = s_ * akp + c * akq;
                    }
                    for k in 0..n {
                        let apk = a[(p, k)];
                        let aqk = a[(q, k)];
                        a[(p, k)] = c * apk - s_ * aqk;
                        a[(q, k)] = s_ * apk + c * aqk;
                    }
                }
            }
        }
        let mut ev: Vec<f64> = (0..n).map(|i| a[(i, i)]).collect();
        ev.sort_by(|a, b| b.total_cmp(a));
        ev
    }

    fn orthonormality_error(m: &Matrix) -> f64 {
        let g = matmul_tn(m, m).unwrap();
        frobenius_norm(&g.sub(&Matrix::identity(m.cols())).unwrap())
    }

    #[test]
    fn identity_and_zero_products() {
        let m = random(3, 5, 1);
        assert_eq!(matmul(&Matrix::identity(3), &m).unwrap(), m);
        let z = matmul(&Matrix::zeros(2, 2), &random(2, 4, 2)).unwrap();
        assert_eq!(z, Matrix::zeros(2, 4));
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let a = random(3, 4, 3);
        let b = random(4, 2, 4);
        let fast = matmul(&a, &b).unwrap();
        assert!(fast.max_abs_diff(&naive_matmul(&a, &b)) < 1e-12);
        let tn = matmul_tn(&a.transpose(), &b).unwrap();
        assert!(tn.max_abs_diff(&fast) < 1e-12);
        let nt = matmul_nt(&a, &b.transpose()).unwrap();
        assert!(nt.max_abs_diff(&fast) < 1e-12);
    }

    #[test]
    fn matmul_rejects_mismatched_shapes() {
        let err = matmul(&Matrix::zeros(2, 3), &Matrix::zeros(2, 3)).unwrap_err();
        match err {
            Error::ShapeMismatch { left, right, .. } => {
                assert_eq!(left, (2, 3));
                assert_eq!(right, (2, 3));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn frobenius_basics() {
        assert_eq!(frobenius_norm_sq(&Matrix::zeros(3, 3)), 0.0);
        assert_eq!(frobenius_norm_sq(&Matrix::diag(&[3.0, 4.0])), 25.0);
        let m = random(5, 5, 5);
        let trace: f64 = {
            let g = naive_matmul(&m.transpose(), &m);
            (0..5).map(|i| g[(i, i)]).sum()
        };
        assert!((frobenius_norm_sq(&m) - trace).abs() <= 1e-12 * trace);
        assert_eq!(frobenius_inner(&m, &m).unwrap(), frobenius_norm_sq(&m));
        assert_eq!(frobenius_inner(&m, &Matrix::zeros(5, 5)).unwrap(), 0.0);
        let b = random(5, 5, 6);
        let mut looped = 0.0;
        for i in 0..5 {
            for j in 0..5 {
                looped += m[(i, j)] * b[(i, j)];
            }
        }
        assert!((frobenius_inner(&m, &b).unwrap() - looped).abs() < 1e-12);
        assert!(frobenius_inner(&m, &Matrix::zeros(5, 4)).is_err());
    }

    #[test]
    fn svd_of_diagonal() {
        let m = Matrix::diag(&[3.0, 2.0, 1.0]);
        let s = svd(&m).unwrap();
        assert_eq!(s.sigma.len(), 3);
        for (got, want) in s.sigma.iter().zip([3.0, 2.0, 1.0]) {
            assert!((got - want).abs() < 1e-12);
        }
        // u and v are signed permutations of the identity
        for k in 0..3 {
            assert!((s.u[(k, k)].abs() - 1.0).abs() < 1e-12);
            assert!((s.vt[(k, k)].abs() - 1.0).abs() < 1e-12);
        }
        assert!(s.reconstruct().max_abs_diff(&m) < 1e-12);
    }

    #[test]
    fn svd_of_rank_one_outer_product() {
        let u = [0.6, 0.8, 0.0];
        let v = [0.0, 1.0 / 2f64.sqrt(), -1.0 / 2f64.sqrt(), 0.0];
        let m = Matrix::from_fn(3, 4, |i, j| u[i] * v[j]);
        let s = svd(&m).unwrap();
        assert!((s.sigma[0] - 1.0).abs() < 1e-12);
        assert!(s.sigma[1..].iter().all(|&x| x < 1e-12));
        assert_eq!(s.numeric_rank(), 1);
        assert!(orthonormality_error(&s.u) < 1e-10 * 3.0);
        assert!(orthonormality_error(&s.vt.transpose()) < 1e-10 * 3.0);
    }

    #[test]
    fn svd_matches_gram_eigenvalues() {
        let m = random(6, 4, 7);
        let s = svd(&m).unwrap();
        let ev = sym_eigenvalues(&naive_matmul(&m.transpose(), &m));
        for (sv, e) in s.sigma.iter().zip(&ev) {
            assert!((sv - e.sqrt()).abs() <= 1e-9 * e.sqrt());
        }
        let rel = frobenius_norm(&s.reconstruct().sub(&m).unwrap()) / frobenius_norm(&m);
        assert!(rel < 1e-10);
        let (b, a) = truncate_svd(&s, 2).unwrap();
        let err = frobenius_dist_sq(&m, &matmul(&b, &a).unwrap()).unwrap();
        let tail = ev[2] + ev[3];
        assert!((err - tail).abs() <= 1e-9 * tail);
    }

    #[test]
    fn svd_of_wide_matrix() {
        let m = random(3, 7, 8);
        let s = svd(&m).unwrap();
        assert_eq!(s.u.shape(), (3, 3));
        assert_eq!(s.vt.shape(), (3, 7));
        assert!(s.reconstruct().max_abs_diff(&m) < 1e-12);
        assert!(orthonormality_error(&s.vt.transpose()) < 3e-10);
    }

    #[test]
    fn svd_of_zero_matrix_is_orthonormal() {
        let s = svd(&Matrix::zeros(4, 3)).unwrap();
        assert!(s.sigma.iter().all(|&v| v == 0.0));
        assert_eq!(s.numeric_rank(), 0);
        assert!(orthonormality_error(&s.u) < 1e-12);
    }

    #[test]
    fn truncation_rank_bounds() {
        let s = svd(&Matrix::diag(&[3.0, 2.0, 1.0])).unwrap();
        assert!(truncate_svd(&s, 0).is_err());
        assert!(truncate_svd(&s, 4).is_err());
        let (b, a) = truncate_svd(&s, 2).unwrap();
        let err = frobenius_dist_sq(&Matrix::diag(&[3.0, 2.0, 1.0]), &matmul(&b, &a).unwrap()).unwrap();
        assert!((err - 1.0).abs() < 1e-12);
        let (b, a) = truncate_svd(&s, 3).unwrap();
        assert!(matmul(&b, &a).unwrap().max_abs_diff(&Matrix::diag(&[3.0, 2.0, 1.0])) < 1e-10);
    }

    #[test]
    fn from_vec_checks_length() {
        assert!(Matrix::from_vec(2, 2, vec![1.0; 3]).is_err());
    }
}
