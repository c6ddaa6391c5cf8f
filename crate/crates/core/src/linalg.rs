//! Dense double-precision linear algebra.
//!
//! [`Matrix`] is a row-major `rows × cols` array. Products go through
//! `matrixmultiply`'s blocked `dgemm`; factorizations (LU with partial
//! pivoting, Cholesky) and the power-iteration spectral norm are written out
//! here.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::ops::{Index, IndexMut, Range};

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Condition-number ceiling accepted by [`invert`].
pub const MAX_INVERT_COND: f64 = 1e12;

#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(format!("{} entries supplied for a {rows}x{cols} matrix", data.len())));
        }
        Ok(Self { rows, cols, data })
    }

    /// Build from nested rows; all rows must have equal length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(Error::shape(format!("row {i} has {} entries, expected {cols}", r.len())));
            }
            data.extend_from_slice(r);
        }
        Ok(Self { rows: rows.len(), cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    pub fn from_diag(diag: &[f64]) -> Self {
        let mut m = Self::zeros(diag.len(), diag.len());
        for (i, &d) in diag.iter().enumerate() {
            m[(i, i)] = d;
        }
        m
    }

    /// Column vector (`len × 1`).
    pub fn column(v: &[f64]) -> Self {
        Self { rows: v.len(), cols: 1, data: v.to_vec() }
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

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
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

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn col_vec(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn diag(&self) -> Vec<f64> {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        t
    }

    /// `self · rhs`.
    pub fn matmul(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.cols != rhs.rows {
            return Err(Error::shape(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, rhs.cols);
        gemm(self, false, rhs, false, &mut out);
        Ok(out)
    }

    /// `selfᵀ · rhs` without materializing the transpose.
    pub fn t_matmul(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.rows != rhs.rows {
            return Err(Error::shape(format!(
                "cannot multiply ({}x{})^T by {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        let mut out = Matrix::zeros(self.cols, rhs.cols);
        gemm(self, true, rhs, false, &mut out);
        Ok(out)
    }

    /// `self · rhsᵀ` without materializing the transpose.
    pub fn matmul_t(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.cols != rhs.cols {
            return Err(Error::shape(format!(
                "cannot multiply {}x{} by ({}x{})^T",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, rhs.rows);
        gemm(self, false, rhs, true, &mut out);
        Ok(out)
    }

    /// Matrix–vector product `self · v`.
    pub fn mul_vec(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.cols {
            return Err(Error::shape(format!(
                "cannot multiply {}x{} by a vector of length {}",
                self.rows,
                self.cols,
                v.len()
            )));
        }
        Ok((0..self.rows).map(|i| dot(self.row(i), v)).collect())
    }

    pub fn add(&self, rhs: &Matrix) -> Result<Matrix> {
        self.zip_with(rhs, |a, b| a + b)
    }

    pub fn sub(&self, rhs: &Matrix) -> Result<Matrix> {
        self.zip_with(rhs, |a, b| a - b)
    }

    pub fn add_assign(&mut self, rhs: &Matrix) -> Result<()> {
        self.check_same_shape(rhs)?;
        for (a, b) in self.data.iter_mut().zip(&rhs.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&self, s: f64) -> Matrix {
        self.map(|v| v * s)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    fn zip_with(&self, rhs: &Matrix, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        self.check_same_shape(rhs)?;
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&rhs.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    fn check_same_shape(&self, rhs: &Matrix) -> Result<()> {
        if self.shape() != rhs.shape() {
            return Err(Error::shape(format!("{}x{} vs {}x{}", self.rows, self.cols, rhs.rows, rhs.cols)));
        }
        Ok(())
    }

    /// Largest absolute entry (0 for an empty matrix).
    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// `max |self − rhs|` entrywise. Shapes must agree.
    pub fn max_abs_diff(&self, rhs: &Matrix) -> Result<f64> {
        self.check_same_shape(rhs)?;
        Ok(self.data.iter().zip(&rhs.data).fold(0.0, |m, (a, b)| m.max((a - b).abs())))
    }

    pub fn frobenius(&self) -> f64 {
        libm::sqrt(self.data.iter().map(|v| v * v).sum())
    }

    /// Induced 1-norm (maximum absolute column sum).
    pub fn norm1(&self) -> f64 {
        (0..self.cols).map(|j| (0..self.rows).map(|i| self[(i, j)].abs()).sum::<f64>()).fold(0.0, f64::max)
    }

    /// Copy of columns `range`.
    pub fn col_block(&self, range: Range<usize>) -> Matrix {
        assert!(range.end <= self.cols, "column block out of bounds");
        let w = range.len();
        let mut out = Matrix::zeros(self.rows, w);
        for i in 0..self.rows {
            out.row_mut(i).copy_from_slice(&self.row(i)[range.clone()]);
        }
        out
    }

    /// Copy of rows `range`.
    pub fn row_block(&self, range: Range<usize>) -> Matrix {
        assert!(range.end <= self.rows, "row block out of bounds");
        Matrix {
            rows: range.len(),
            cols: self.cols,
            data: self.data[range.start * self.cols..range.end * self.cols].to_vec(),
        }
    }

    /// Write `block` into columns starting at `col`.
    pub fn set_col_block(&mut self, col: usize, block: &Matrix) {
        assert_eq!(block.rows, self.rows, "row count mismatch");
        assert!(col + block.cols <= self.cols, "column block out of bounds");
        for i in 0..self.rows {
            self.row_mut(i)[col..col + block.cols].copy_from_slice(block.row(i));
        }
    }

    pub fn select_rows(&self, idx: &[usize]) -> Matrix {
        let mut out = Matrix::zeros(idx.len(), self.cols);
        for (k, &i) in idx.iter().enumerate() {
            out.row_mut(k).copy_from_slice(self.row(i));
        }
        out
    }

    pub fn select_cols(&self, idx: &[usize]) -> Matrix {
        Matrix::from_fn(self.rows, idx.len(), |i, k| self[(i, idx[k])])
    }

    /// Block-diagonal matrix assembled from square blocks.
    pub fn block_diagonal(blocks: &[Matrix]) -> Result<Matrix> {
        let mut n = 0;
        for b in blocks {
            if !b.is_square() {
                return Err(Error::shape("block-diagonal blocks must be square"));
            }
            n += b.rows;
        }
        let mut out = Matrix::zeros(n, n);
        let mut off = 0;
        for b in blocks {
            for i in 0..b.rows {
                out.row_mut(off + i)[off..off + b.cols].copy_from_slice(b.row(i));
            }
            off += b.rows;
        }
        Ok(out)
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;

    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

fn gemm(a: &Matrix, ta: bool, b: &Matrix, tb: bool, c: &mut Matrix) {
    let (m, k) = if ta { (a.cols, a.rows) } else { (a.rows, a.cols) };
    let n = if tb { b.rows } else { b.cols };
    debug_assert_eq!(c.shape(), (m, n));
    if m == 0 || n == 0 || k == 0 {
        c.data.iter_mut().for_each(|v| *v = 0.0);
        return;
    }
    let (rsa, csa) = if ta { (1, a.cols as isize) } else { (a.cols as isize, 1) };
    let (rsb, csb) = if tb { (1, b.cols as isize) } else { (b.cols as isize, 1) };
    // SAFETY: strides describe exactly the row-major buffers of `a`, `b` and
    // `c`, whose lengths match the (m, k), (k, n) and (m, n) extents checked
    // by the callers; `c` does not alias the inputs.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            0.0,
            c.data.as_mut_ptr(),
            c.cols as isize,
            1,
        );
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm2(a: &[f64]) -> f64 {
    libm::sqrt(dot(a, a))
}

/// LU factorization `P·A = L·U` with partial pivoting.
#[derive(Debug, Clone)]
pub struct Lu {
    lu: Matrix,
    perm: Vec<usize>,
    min_pivot: f64,
}

impl Lu {
    pub fn factor(a: &Matrix) -> Result<Lu> {
        if !a.is_square() {
            return Err(Error::shape(format!("LU needs a square matrix, got {}x{}", a.rows, a.cols)));
        }
        let n = a.rows;
        let mut lu = a.clone();
        let mut perm: Vec<usize> = (0..n).collect();
        let mut min_pivot = f64::INFINITY;
        for k in 0..n {
            let (p, pmag) =
                (k..n)
                    .map(|i| (i, lu[(i, k)].abs()))
                    .fold((k, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best });
            min_pivot = min_pivot.min(pmag);
            if pmag == 0.0 || !pmag.is_finite() {
                return Err(Error::SingularMatrix { pivot: pmag, cond_estimate: f64::INFINITY });
            }
            if p != k {
                perm.swap(p, k);
                for j in 0..n {
                    lu.data.swap(p * n + j, k * n + j);
                }
            }
            let pivot = lu[(k, k)];
            for i in k + 1..n {
                let f = lu[(i, k)] / pivot;
                lu[(i, k)] = f;
                if f != 0.0 {
                    for j in k + 1..n {
                        let u = lu[(k, j)];
                        lu[(i, j)] -= f * u;
                    }
                }
            }
        }
        Ok(Lu { lu, perm, min_pivot: if n == 0 { 0.0 } else { min_pivot } })
    }

    pub fn dim(&self) -> usize {
        self.lu.rows
    }

    pub fn min_pivot(&self) -> f64 {
        self.min_pivot
    }

    /// Solve `A x = b`.
    pub fn solve_vec(&self, b: &[f64]) -> Vec<f64> {
        let n = self.dim();
        let mut x: Vec<f64> = self.perm.iter().map(|&p| b[p]).collect();
        for i in 0..n {
            let s: f64 = (0..i).map(|j| self.lu[(i, j)] * x[j]).sum();
            x[i] -= s;
        }
        for i in (0..n).rev() {
            let s: f64 = (i + 1..n).map(|j| self.lu[(i, j)] * x[j]).sum();
            x[i] = (x[i] - s) / self.lu[(i, i)];
        }
        x
    }

    /// Solve `Aᵀ x = b`.
    pub fn solve_transpose_vec(&self, b: &[f64]) -> Vec<f64> {
        let n = self.dim();
        // Aᵀ = Uᵀ Lᵀ P, so solve Uᵀ w = b, then Lᵀ y = w, then x = Pᵀ y.
        let mut w = b.to_vec();
        for i in 0..n {
            let s: f64 = (0..i).map(|j| self.lu[(j, i)] * w[j]).sum();
            w[i] = (w[i] - s) / self.lu[(i, i)];
        }
        for i in (0..n).rev() {
            let s: f64 = (i + 1..n).map(|j| self.lu[(j, i)] * w[j]).sum();
            w[i] -= s;
        }
        let mut x = vec![0.0; n];
        for (k, &p) in self.perm.iter().enumerate() {
            x[p] = w[k];
        }
        x
    }

    pub fn inverse(&self) -> Matrix {
        let n = self.dim();
        let mut inv = Matrix::zeros(n, n);
        let mut e = vec![0.0; n];
        for j in 0..n {
            e.iter_mut().for_each(|v| *v = 0.0);
            e[j] = 1.0;
            let col = self.solve_vec(&e);
            for i in 0..n {
                inv[(i, j)] = col[i];
            }
        }
        inv
    }

    /// Hager–Higham estimate of `‖A⁻¹‖₁`.
    pub fn inverse_norm1_estimate(&self) -> f64 {
        let n = self.dim();
        if n == 0 {
            return 0.0;
        }
        let mut x = vec![1.0 / n as f64; n];
        let mut est = 0.0;
        for _ in 0..5 {
            let y = self.solve_vec(&x);
            let y_norm: f64 = y.iter().map(|v| v.abs()).sum();
            if y_norm <= est {
                break;
            }
            est = y_norm;
            let xi: Vec<f64> = y.iter().map(|&v| if v >= 0.0 { 1.0 } else { -1.0 }).collect();
            let z = self.solve_transpose_vec(&xi);
            let (jmax, zmax) =
                z.iter().enumerate().fold((0, -1.0), |b, (j, v)| if v.abs() > b.1 { (j, v.abs()) } else { b });
            if zmax <= dot(&z, &x) {
                break;
            }
            x.iter_mut().for_each(|v| *v = 0.0);
            x[jmax] = 1.0;
        }
        // Higham's alternating-sign probe guards against the estimator
        // stalling on a misleading first direction.
        let alt: Vec<f64> = (0..n)
            .map(|i| {
                let s = if i % 2 == 0 { 1.0 } else { -1.0 };
                s * (1.0 + i as f64 / (n.max(2) - 1) as f64)
            })
            .collect();
        let y = self.solve_vec(&alt);
        let alt_est = 2.0 * y.iter().map(|v| v.abs()).sum::<f64>() / (3.0 * n as f64);
        est.max(alt_est)
    }
}

/// Estimated 1-norm condition number `‖A‖₁ · ‖A⁻¹‖₁`.
pub fn cond1_estimate(a: &Matrix) -> Result<f64> {
    let lu = Lu::factor(a)?;
    Ok(a.norm1() * lu.inverse_norm1_estimate())
}

/// Inverse via LU with partial pivoting.
///
/// Fails with [`Error::SingularMatrix`] when a pivot vanishes or the 1-norm
/// condition estimate exceeds [`MAX_INVERT_COND`].
pub fn invert(a: &Matrix) -> Result<Matrix> {
    let lu = Lu::factor(a)?;
    let cond = a.norm1() * lu.inverse_norm1_estimate();
    if !(cond <= MAX_INVERT_COND) {
        return Err(Error::SingularMatrix { pivot: lu.min_pivot(), cond_estimate: cond });
    }
    Ok(lu.inverse())
}

/// Solve `A X = B` for symmetric positive definite `A` by Cholesky.
pub fn solve_spd(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if !a.is_square() || a.rows != b.rows {
        return Err(Error::shape(format!("solve_spd: A is {}x{}, B is {}x{}", a.rows, a.cols, b.rows, b.cols)));
    }
    let n = a.rows;
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let mut d = a[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if !(d > 0.0) {
            return Err(Error::NotPositiveDefinite { index: j, value: d });
        }
        let ljj = libm::sqrt(d);
        l[(j, j)] = ljj;
        for i in j + 1..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / ljj;
        }
    }
    let mut x = b.clone();
    for c in 0..b.cols {
        for i in 0..n {
            let mut s = x[(i, c)];
            for k in 0..i {
                s -= l[(i, k)] * x[(k, c)];
            }
            x[(i, c)] = s / l[(i, i)];
        }
        for i in (0..n).rev() {
            let mut s = x[(i, c)];
            for k in i + 1..n {
                s -= l[(k, i)] * x[(k, c)];
            }
            x[(i, c)] = s / l[(i, i)];
        }
    }
    Ok(x)
}

/// Orthonormal basis (as columns) of the zero-mean subspace `{z : 𝟙ᵀz = 0}`.
///
/// Built from the Householder reflector `H` that sends `𝟙/√d` to `−e₀`:
/// the remaining `d − 1` columns of `H` are orthonormal and orthogonal to
/// `𝟙`.
pub fn orthonormal_basis_zero_mean(d: usize) -> Result<Matrix> {
    if d < 2 {
        return Err(Error::DimensionTooSmall { dim: d, min: 2 });
    }
    let inv_sqrt = 1.0 / libm::sqrt(d as f64);
    let mut u = vec![inv_sqrt; d];
    u[0] += 1.0;
    let uu = dot(&u, &u);
    Ok(Matrix::from_fn(d, d - 1, |i, j| {
        let col = j + 1;
        let e = if i == col { 1.0 } else { 0.0 };
        e - 2.0 * u[i] * u[col] / uu
    }))
}

/// Largest singular value by power iteration on `AᵀA`.
///
/// Starts from the normalized all-ones vector and stops when the Rayleigh
/// quotient changes by less than `1e-13` relatively, or after 10 000 steps.
pub fn spectral_norm(a: &Matrix) -> f64 {
    const MAX_ITERS: usize = 10_000;
    const REL_TOL: f64 = 1e-13;
    let n = a.cols;
    if n == 0 || a.rows == 0 || a.max_abs() == 0.0 {
        return 0.0;
    }
    let apply = |v: &[f64]| -> Vec<f64> {
        let av = a.mul_vec(v).expect("length matches cols");
        let mut out = vec![0.0; n];
        for (i, &s) in av.iter().enumerate() {
            for (o, &aij) in out.iter_mut().zip(a.row(i)) {
                *o += aij * s;
            }
        }
        out
    };
    let mut v = vec![1.0 / libm::sqrt(n as f64); n];
    let mut w = apply(&v);
    if norm2(&w) <= 1e-300 {
        // The all-ones start lies in the null space of AᵀA; restart from the
        // heaviest column direction instead.
        let j = (0..n)
            .max_by(|&x, &y| {
                let cx: f64 = (0..a.rows).map(|i| a[(i, x)] * a[(i, x)]).sum();
                let cy: f64 = (0..a.rows).map(|i| a[(i, y)] * a[(i, y)]).sum();
                cx.total_cmp(&cy)
            })
            .unwrap_or(0);
        v.iter_mut().for_each(|x| *x = 0.0);
        v[j] = 1.0;
        w = apply(&v);
    }
    let mut lambda = dot(&v, &w);
    for _ in 0..MAX_ITERS {
        let nw = norm2(&w);
        if nw == 0.0 {
            return 0.0;
        }
        for (vi, wi) in v.iter_mut().zip(&w) {
            *vi = wi / nw;
        }
        w = apply(&v);
        let next = dot(&v, &w);
        let done = (next - lambda).abs() <= REL_TOL * next.abs();
        lambda = next;
        if done {
            break;
        }
    }
    libm::sqrt(lambda.max(0.0))
}

/// Spectral condition number `σ_max / σ_min = ‖A‖₂ ‖A⁻¹‖₂`.
pub fn condition_number(a: &Matrix) -> Result<f64> {
    let inv = invert(a)?;
    Ok(spectral_norm(a) * spectral_norm(&inv))
}

/// Numerical rank by Gaussian elimination with complete pivoting; pivots
/// below `rel_tol · max|A|` count as zero.
pub fn numerical_rank(a: &Matrix, rel_tol: f64) -> usize {
    let mut m = a.clone();
    let (r, c) = m.shape();
    let scale = m.max_abs();
    if scale == 0.0 {
        return 0;
    }
    let mut rank = 0;
    for k in 0..r.min(c) {
        let mut best = (k, k, 0.0);
        for i in k..r {
            for j in k..c {
                let v = m[(i, j)].abs();
                if v > best.2 {
                    best = (i, j, v);
                }
            }
        }
        if best.2 <= rel_tol * scale {
            break;
        }
        rank += 1;
        let (pi, pj, _) = best;
        for j in 0..c {
            m.data.swap(pi * c + j, k * c + j);
        }
        for i in 0..r {
            m.data.swap(i * c + pj, i * c + k);
        }
        let p = m[(k, k)];
        for i in k + 1..r {
            let f = m[(i, k)] / p;
            for j in k..c {
                let v = m[(k, j)];
                m[(i, j)] -= f * v;
            }
        }
    }
    rank
}

/// `rows × cols` matrix with i.i.d. `N(0, scale²)` entries, drawn row-major.
pub fn gaussian_matrix(rows: usize, cols: usize, scale: f64, rng: &mut Rng) -> Result<Matrix> {
    if !(scale > 0.0) || !scale.is_finite() {
        return Err(Error::InvalidArgument(format!("gaussian scale must be positive, got {scale}")));
    }
    let data = (0..rows * cols).map(|_| scale * rng.normal()).collect();
    Ok(Matrix { rows, cols, data })
}

const MAX_CONDITIONED_DRAWS: usize = 100;

/// Square Gaussian matrix redrawn until `cond₂ ≤ max_cond`, giving up after
/// 100 draws.
pub fn gaussian_conditioned(d: usize, scale: f64, max_cond: f64, rng: &mut Rng) -> Result<Matrix> {
    for _ in 0..MAX_CONDITIONED_DRAWS {
        let w = gaussian_matrix(d, d, scale, rng)?;
        match condition_number(&w) {
            Ok(c) if c <= max_cond => return Ok(w),
            _ => continue,
        }
    }
    Err(Error::ConditioningFailure { attempts: MAX_CONDITIONED_DRAWS, max_cond })
}
