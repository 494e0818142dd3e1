//! Small dense linear algebra: a row-major `Matrix`, Gram-Schmidt
//! orthonormalisation, cyclic Jacobi for symmetric matrices, power-iteration
//! spectral norm and the PSD square root.
//!
//! Dimensions in this crate are tiny (d ≤ ~32), so everything is written for
//! clarity and accuracy rather than cache behaviour.

use std::fmt;
use std::ops::{Index, IndexMut};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{check_dim, Error, Result};

/// Tolerances used by this module. Tests cite these by name.
pub mod tol {
    /// Maximum entrywise deviation of `QᵀQ` from the identity after orthonormalisation.
    pub const ORTHONORMAL: f64 = 1e-10;
    /// Accepted deviation of `BᵀB` from the identity for inputs that claim to be orthonormal.
    pub const ORTHONORMAL_INPUT: f64 = 1e-8;
    /// Residual norm below which a complement candidate column is discarded.
    pub const COMPLEMENT_RESIDUAL: f64 = 1e-8;
    /// Maximum asymmetry `‖S − Sᵀ‖_max` accepted by the symmetric eigensolver.
    pub const SYMMETRY: f64 = 1e-8;
    /// Jacobi stops when the off-diagonal Frobenius norm falls below this times `‖S‖_F`.
    pub const JACOBI_OFF_DIAGONAL: f64 = 1e-15;
    /// Sweep budget for cyclic Jacobi.
    pub const JACOBI_MAX_SWEEPS: usize = 100;
    /// Eigenvalues in `[-PSD_CLIP, 0)` are clipped to zero by `psd_sqrt`.
    pub const PSD_CLIP: f64 = 1e-8;
    /// Eigenvalues below `-PSD_REJECT` make `psd_sqrt` fail.
    pub const PSD_REJECT: f64 = 1e-6;
    /// Default power-iteration budget.
    pub const POWER_ITERS: usize = 2000;
    /// Default relative convergence threshold for power iteration.
    pub const POWER_TOL: f64 = 1e-14;
}

/// Dense real matrix stored row-major.
#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
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
        Self::scaled_identity(n, 1.0)
    }

    pub fn scaled_identity(n: usize, scale: f64) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = scale;
        }
        m
    }

    pub fn from_diag(diag: &[f64]) -> Self {
        let mut m = Self::zeros(diag.len(), diag.len());
        for (i, &v) in diag.iter().enumerate() {
            m[(i, i)] = v;
        }
        m
    }

    /// Builds a matrix from a row-major buffer.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        check_dim(rows * cols, data.len())?;
        Ok(Matrix { rows, cols, data })
    }

    /// Builds a matrix from equally long rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            check_dim(cols, r.as_ref().len())?;
            data.extend_from_slice(r.as_ref());
        }
        Ok(Matrix {
            rows: rows.len(),
            cols,
            data,
        })
    }

    /// Builds a matrix whose columns are the given vectors.
    pub fn from_columns<C: AsRef<[f64]>>(columns: &[C]) -> Result<Self> {
        let rows = columns.first().map_or(0, |c| c.as_ref().len());
        let mut m = Matrix::zeros(rows, columns.len());
        for (j, c) in columns.iter().enumerate() {
            check_dim(rows, c.as_ref().len())?;
            for (i, &v) in c.as_ref().iter().enumerate() {
                m[(i, j)] = v;
            }
        }
        Ok(m)
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Matrix { rows, cols, data }
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

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    /// Row-major entries.
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
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn set_column(&mut self, j: usize, values: &[f64]) {
        for (i, &v) in values.iter().enumerate().take(self.rows) {
            self[(i, j)] = v;
        }
    }

    pub fn diag(&self) -> Vec<f64> {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).collect()
    }

    pub fn trace(&self) -> f64 {
        self.diag().iter().sum()
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    pub fn matmul(&self, rhs: &Matrix) -> Result<Matrix> {
        check_dim(self.cols, rhs.rows)?;
        let mut out = Matrix::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * rhs.cols..(i + 1) * rhs.cols];
            for (k, &a) in self.row(i).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for (o, &b) in out_row.iter_mut().zip(rhs.row(k)) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `selfᵀ · rhs` without materialising the transpose.
    pub fn t_matmul(&self, rhs: &Matrix) -> Result<Matrix> {
        check_dim(self.rows, rhs.rows)?;
        let mut out = Matrix::zeros(self.cols, rhs.cols);
        for k in 0..self.rows {
            let rhs_row = rhs.row(k);
            for (i, &a) in self.row(k).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let out_row = &mut out.data[i * rhs.cols..(i + 1) * rhs.cols];
                for (o, &b) in out_row.iter_mut().zip(rhs_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    pub fn matvec(&self, v: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.cols, v.len())?;
        Ok((0..self.rows).map(|i| dot(self.row(i), v)).collect())
    }

    /// `selfᵀ · v`.
    pub fn t_matvec(&self, v: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.rows, v.len())?;
        let mut out = vec![0.0; self.cols];
        for (i, &vi) in v.iter().enumerate() {
            axpy(vi, self.row(i), &mut out);
        }
        Ok(out)
    }

    pub fn add(&self, rhs: &Matrix) -> Result<Matrix> {
        self.zip_with(rhs, |a, b| a + b)
    }

    pub fn sub(&self, rhs: &Matrix) -> Result<Matrix> {
        self.zip_with(rhs, |a, b| a - b)
    }

    pub fn scale(&self, c: f64) -> Matrix {
        self.map(|v| c * v)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_with(&self, rhs: &Matrix, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        check_dim(self.rows, rhs.rows)?;
        check_dim(self.cols, rhs.cols)?;
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&rhs.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn frobenius_norm(&self) -> f64 {
        norm(&self.data)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |acc, v| acc.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Largest entrywise asymmetry `max |S_ij − S_ji|`; `+∞` for non-square input.
    pub fn asymmetry(&self) -> f64 {
        if !self.is_square() {
            return f64::INFINITY;
        }
        let mut worst: f64 = 0.0;
        for i in 0..self.rows {
            for j in (i + 1)..self.cols {
                worst = worst.max((self[(i, j)] - self[(j, i)]).abs());
            }
        }
        worst
    }

    /// `(S + Sᵀ)/2`.
    pub fn symmetrize(&self) -> Matrix {
        Matrix::from_fn(self.rows, self.cols, |i, j| 0.5 * (self[(i, j)] + self[(j, i)]))
    }

    /// Columns `start..end` as a new matrix.
    pub fn columns(&self, start: usize, end: usize) -> Matrix {
        Matrix::from_fn(self.rows, end - start, |i, j| self[(i, start + j)])
    }

    /// `[self | rhs]`.
    pub fn hstack(&self, rhs: &Matrix) -> Result<Matrix> {
        check_dim(self.rows, rhs.rows)?;
        Ok(Matrix::from_fn(self.rows, self.cols + rhs.cols, |i, j| {
            if j < self.cols {
                self[(i, j)]
            } else {
                rhs[(i, j - self.cols)]
            }
        }))
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;

    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for i in 0..self.rows {
            writeln!(f, "  {:?}", self.row(i))?;
        }
        write!(f, "]")
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `y += alpha * x`.
#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Outer product `a bᵀ`.
pub fn outer(a: &[f64], b: &[f64]) -> Matrix {
    Matrix::from_fn(a.len(), b.len(), |i, j| a[i] * b[j])
}

/// Removes the components of `v` along the given orthonormal vectors, twice
/// (classical Gram-Schmidt with one re-orthogonalisation pass).
fn project_out(v: &mut [f64], basis: &[Vec<f64>]) {
    for _ in 0..2 {
        for q in basis {
            let c = dot(q, v);
            axpy(-c, q, v);
        }
    }
}

/// Orthonormalises the columns of a `d×k` matrix, preserving their span.
///
/// Fails with `DegenerateInput` when a column's residual after projecting out
/// the previous ones has norm `≤ tol`, i.e. the input is numerically rank
/// deficient.
pub fn gram_schmidt_orthonormalize(a: &Matrix, tol: f64) -> Result<Matrix> {
    let (d, k) = a.shape();
    if k > d {
        return Err(Error::degenerate(format!(
            "cannot orthonormalise {k} columns in dimension {d}"
        )));
    }
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(k);
    for j in 0..k {
        let mut v = a.column(j);
        project_out(&mut v, &basis);
        let r = norm(&v);
        if !(r > tol) {
            return Err(Error::degenerate(format!(
                "column {j} has residual norm {r:e} <= {tol:e}"
            )));
        }
        v.iter_mut().for_each(|x| *x /= r);
        basis.push(v);
    }
    Matrix::from_columns(&basis)
}

/// Largest entrywise deviation of `AᵀA` from the identity.
pub fn orthonormality_defect(a: &Matrix) -> f64 {
    let gram = a.t_matmul(a).expect("AᵀA is always conformable");
    gram.sub(&Matrix::identity(a.cols())).expect("same shape").max_abs()
}

/// Orthonormal basis of the orthogonal complement of `col(B)` for a
/// column-orthonormal `d×k` matrix `B`.
///
/// Runs Gram-Schmidt over `[B | I_d]`, greedily taking the standard basis
/// vector with the largest residual at each step.
pub fn orthonormal_complement(b: &Matrix) -> Result<Matrix> {
    let (d, k) = b.shape();
    let defect = orthonormality_defect(b);
    if k > d || !(defect <= tol::ORTHONORMAL_INPUT) {
        return Err(Error::degenerate(format!(
            "input is not column-orthonormal (max |BᵀB − I| = {defect:e})"
        )));
    }
    let mut basis: Vec<Vec<f64>> = (0..k).map(|j| b.column(j)).collect();
    let mut candidates: Vec<usize> = (0..d).collect();
    let mut complement = Vec::with_capacity(d - k);
    while complement.len() < d - k {
        let mut best: Option<(usize, Vec<f64>, f64)> = None;
        for (pos, &e) in candidates.iter().enumerate() {
            let mut v = vec![0.0; d];
            v[e] = 1.0;
            project_out(&mut v, &basis);
            let r = norm(&v);
            if best.as_ref().is_none_or(|(_, _, br)| r > *br) {
                best = Some((pos, v, r));
            }
        }
        let (pos, mut v, r) = best.ok_or_else(|| Error::degenerate("ran out of candidates"))?;
        if r <= tol::COMPLEMENT_RESIDUAL {
            return Err(Error::degenerate("complement candidates are all in col(B)"));
        }
        candidates.remove(pos);
        v.iter_mut().for_each(|x| *x /= r);
        basis.push(v.clone());
        complement.push(v);
    }
    if complement.is_empty() {
        return Ok(Matrix::zeros(d, 0));
    }
    Matrix::from_columns(&complement)
}

/// Eigen-decomposition of a symmetric matrix.
#[derive(Debug, Clone)]
pub struct SymmetricEigen {
    /// Eigenvalues in descending order.
    pub values: Vec<f64>,
    /// Column `j` is the unit eigenvector for `values[j]`.
    pub vectors: Matrix,
}

/// Symmetric eigendecomposition by cyclic Jacobi rotations.
pub fn symmetric_eig(s: &Matrix) -> Result<SymmetricEigen> {
    if !s.is_square() {
        return Err(Error::DimensionMismatch {
            expected: s.rows(),
            found: s.cols(),
        });
    }
    let asym = s.asymmetry();
    if !(asym <= tol::SYMMETRY) {
        return Err(Error::degenerate(format!(
            "matrix is not symmetric (max |S − Sᵀ| = {asym:e})"
        )));
    }
    let m = s.rows();
    let mut a = s.symmetrize();
    let mut v = Matrix::identity(m);
    let scale = a.frobenius_norm();
    let threshold = tol::JACOBI_OFF_DIAGONAL * scale;

    let off_diagonal = |a: &Matrix| -> f64 {
        let mut acc = 0.0;
        for i in 0..m {
            for j in (i + 1)..m {
                acc += 2.0 * a[(i, j)] * a[(i, j)];
            }
        }
        acc.sqrt()
    };

    let mut converged = off_diagonal(&a) <= threshold;
    let mut sweeps = 0;
    while !converged && sweeps < tol::JACOBI_MAX_SWEEPS {
        sweeps += 1;
        for p in 0..m {
            for q in (p + 1)..m {
                let apq = a[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
                let sign = if theta >= 0.0 { 1.0 } else { -1.0 };
                let t = sign / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let sn = t * c;
                for k in 0..m {
                    let akp = a[(k, p)];
                    let akq = a[(k, q)];
                    a[(k, p)] = c * akp - sn * akq;
                    a[(k, q)] = sn * akp + c * akq;
                }
                for k in 0..m {
                    let apk = a[(p, k)];
                    let aqk = a[(q, k)];
                    a[(p, k)] = c * apk - sn * aqk;
                    a[(q, k)] = sn * apk + c * aqk;
                }
                a[(p, q)] = 0.0;
                a[(q, p)] = 0.0;
                for k in 0..m {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - sn * vkq;
                    v[(k, q)] = sn * vkp + c * vkq;
                }
            }
        }
        converged = off_diagonal(&a) <= threshold;
    }
    if !converged {
        return Err(Error::NoConvergence {
            sweeps,
            off_diagonal: off_diagonal(&a),
        });
    }

    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&i, &j| a[(j, j)].total_cmp(&a[(i, i)]));
    let values = order.iter().map(|&i| a[(i, i)]).collect();
    let vectors = Matrix::from_fn(m, m, |i, j| v[(i, order[j])]);
    Ok(SymmetricEigen { values, vectors })
}

/// Singular values of `m`, descending, as square roots of the eigenvalues of `MᵀM`.
pub fn singular_values(m: &Matrix) -> Result<Vec<f64>> {
    let gram = m.t_matmul(m)?;
    let eig = symmetric_eig(&gram.symmetrize())?;
    Ok(eig.values.into_iter().map(|l| l.max(0.0).sqrt()).collect())
}

/// Largest singular value by power iteration on `MᵀM`.
///
/// Starts from `(1,…,1)/√d`. If the result is provably not the top singular
/// value (it falls below `‖M‖_F/√d`, a lower bound on `σ_max`), one restart
/// from a fixed-seed Gaussian vector is made.
pub fn spectral_norm(m: &Matrix, iters: usize, tol: f64) -> f64 {
    let d = m.cols();
    if d == 0 || m.rows() == 0 {
        return 0.0;
    }
    let fro = m.frobenius_norm();
    if fro == 0.0 {
        return 0.0;
    }
    let start = vec![1.0 / (d as f64).sqrt(); d];
    let estimate = power_iterate(m, start, iters, tol);
    let lower_bound = fro / (m.rows().min(d) as f64).sqrt();
    if estimate >= lower_bound * (1.0 - 1e-9) {
        return estimate;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(POWER_RESTART_SEED);
    let restart: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
    estimate.max(power_iterate(m, restart, iters, tol))
}

const POWER_RESTART_SEED: u64 = 0x5eed_0f5e_c0de_0001;

fn power_iterate(m: &Matrix, mut v: Vec<f64>, iters: usize, tol: f64) -> f64 {
    let nv = norm(&v);
    if nv == 0.0 {
        return 0.0;
    }
    v.iter_mut().for_each(|x| *x /= nv);
    let mut sigma = 0.0;
    for _ in 0..iters.max(1) {
        let mv = m.matvec(&v).expect("square dims");
        let next_sigma = norm(&mv);
        let mut w = m.t_matvec(&mv).expect("square dims");
        let nw = norm(&w);
        if nw == 0.0 {
            return next_sigma;
        }
        w.iter_mut().for_each(|x| *x /= nw);
        v = w;
        let done = (next_sigma - sigma).abs() <= tol * next_sigma;
        sigma = next_sigma;
        if done {
            break;
        }
    }
    norm(&m.matvec(&v).expect("square dims")).max(sigma)
}

/// Spectral norm with the module's default budget.
pub fn spectral_norm_default(m: &Matrix) -> f64 {
    spectral_norm(m, tol::POWER_ITERS, tol::POWER_TOL)
}

/// Symmetric square root of a symmetric positive semi-definite matrix.
pub fn psd_sqrt(s: &Matrix) -> Result<Matrix> {
    let eig = symmetric_eig(s)?;
    let d = s.rows();
    if let Some(&min) = eig.values.last() {
        if min < -tol::PSD_REJECT {
            return Err(Error::degenerate(format!(
                "matrix is not positive semi-definite (eigenvalue {min:e})"
            )));
        }
    }
    let roots: Vec<f64> = eig.values.iter().map(|&l| l.max(0.0).sqrt()).collect();
    let v = &eig.vectors;
    let mut r = Matrix::zeros(d, d);
    for (k, &root) in roots.iter().enumerate() {
        if root == 0.0 {
            continue;
        }
        for i in 0..d {
            let vik = v[(i, k)] * root;
            for j in 0..d {
                r[(i, j)] += vik * v[(j, k)];
            }
        }
    }
    Ok(r.symmetrize())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_fn(rows, cols, |_, _| StandardNormal.sample(&mut rng))
    }

    #[test]
    fn identity_is_already_orthonormal() {
        let q = gram_schmidt_orthonormalize(&Matrix::identity(3), 1e-12).unwrap();
        assert_eq!(q, Matrix::identity(3));
    }

    #[test]
    fn gram_schmidt_small_example() {
        let a = Matrix::from_rows(&[[1.0, 1.0], [0.0, 1.0], [0.0, 0.0]]).unwrap();
        let q = gram_schmidt_orthonormalize(&a, 1e-12).unwrap();
        assert!(orthonormality_defect(&q) < tol::ORTHONORMAL);
    }

    #[test]
    fn gram_schmidt_reprojection_identity() {
        let a = random_matrix(10, 2, 11);
        let q = gram_schmidt_orthonormalize(&a, 1e-12).unwrap();
        assert!(orthonormality_defect(&q) < tol::ORTHONORMAL);
        // each column of A equals Q(QᵀA)
        let back = q.matmul(&q.t_matmul(&a).unwrap()).unwrap();
        assert!(back.sub(&a).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn gram_schmidt_rejects_rank_deficiency() {
        let a = Matrix::from_rows(&[[1.0, 2.0], [1.0, 2.0], [0.0, 0.0]]).unwrap();
        assert!(matches!(
            gram_schmidt_orthonormalize(&a, 1e-10),
            Err(Error::DegenerateInput(_))
        ));
    }

    #[test]
    fn complement_of_leading_identity_columns() {
        let b = Matrix::identity(4).columns(0, 2);
        let bp = orthonormal_complement(&b).unwrap();
        assert_eq!(bp.shape(), (4, 2));
        // spans e3, e4
        for i in 0..2 {
            assert!(bp.row(i).iter().all(|v| v.abs() < 1e-15));
        }
        assert!(orthonormality_defect(&bp) < 1e-12);
    }

    #[test]
    fn complement_in_the_plane() {
        let b = Matrix::from_rows(&[[1.0], [0.0]]).unwrap();
        let bp = orthonormal_complement(&b).unwrap();
        assert!(bp[(0, 0)].abs() < 1e-15);
        assert!((bp[(1, 0)].abs() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn complement_assembles_an_orthogonal_matrix() {
        let b = gram_schmidt_orthonormalize(&random_matrix(10, 2, 3), 1e-12).unwrap();
        let bp = orthonormal_complement(&b).unwrap();
        let full = b.hstack(&bp).unwrap();
        assert!(orthonormality_defect(&full) < 1e-8);
        assert!(
            full.matmul(&full.transpose())
                .unwrap()
                .sub(&Matrix::identity(10))
                .unwrap()
                .max_abs()
                < 1e-8
        );
    }

    #[test]
    fn complement_rejects_non_orthonormal_input() {
        let b = Matrix::from_rows(&[[2.0], [0.0]]).unwrap();
        assert!(orthonormal_complement(&b).is_err());
    }

    #[test]
    fn eig_of_diagonal() {
        let e = symmetric_eig(&Matrix::from_diag(&[3.0, 1.0, 2.0])).unwrap();
        assert_eq!(e.values, vec![3.0, 2.0, 1.0]);
        // permutation of the identity
        for j in 0..3 {
            let col = e.vectors.column(j);
            let ones = col.iter().filter(|v| (v.abs() - 1.0).abs() < 1e-15).count();
            assert_eq!(ones, 1);
        }
    }

    #[test]
    fn eig_of_two_by_two() {
        let s = Matrix::from_rows(&[[2.0, 1.0], [1.0, 2.0]]).unwrap();
        let e = symmetric_eig(&s).unwrap();
        assert!((e.values[0] - 3.0).abs() < 1e-14);
        assert!((e.values[1] - 1.0).abs() < 1e-14);
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let v0 = e.vectors.column(0);
        assert!((v0[0].abs() - h).abs() < 1e-14 && (v0[0] - v0[1]).abs() < 1e-14);
        let v1 = e.vectors.column(1);
        assert!((v1[0] + v1[1]).abs() < 1e-14);
    }

    #[test]
    fn eig_diagonalises_random_symmetric() {
        let a = random_matrix(8, 8, 5);
        let s = a.add(&a.transpose()).unwrap();
        let e = symmetric_eig(&s).unwrap();
        let d = e.vectors.t_matmul(&s.matmul(&e.vectors).unwrap()).unwrap();
        let norm_s = s.max_abs();
        for i in 0..8 {
            for j in 0..8 {
                let expected = if i == j { e.values[i] } else { 0.0 };
                assert!((d[(i, j)] - expected).abs() < 1e-8 * norm_s);
            }
        }
        assert!(e.values.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn eig_rejects_asymmetric() {
        let s = Matrix::from_rows(&[[1.0, 2.0], [0.0, 1.0]]).unwrap();
        assert!(symmetric_eig(&s).is_err());
    }

    #[test]
    fn spectral_norm_of_diagonal_and_zero() {
        let m = Matrix::from_diag(&[1.0, -4.0, 3.0]);
        assert!((spectral_norm_default(&m) - 4.0).abs() < 1e-10);
        assert_eq!(spectral_norm_default(&Matrix::zeros(3, 3)), 0.0);
    }

    #[test]
    fn spectral_norm_restarts_when_start_is_orthogonal() {
        // top singular vector (1,-1)/√2 is orthogonal to the (1,1)/√2 start
        let m = Matrix::from_rows(&[[2.0, -1.0], [-1.0, 2.0]]).unwrap();
        assert!((spectral_norm_default(&m) - 3.0).abs() < 1e-10);
        let null_start = Matrix::from_rows(&[[1.0, -1.0], [-1.0, 1.0]]).unwrap();
        assert!((spectral_norm_default(&null_start) - 2.0).abs() < 1e-10);
    }

    #[test]
    fn spectral_norm_matches_eigensolver() {
        for seed in 0..10 {
            let m = random_matrix(5, 5, 100 + seed);
            let oracle = symmetric_eig(&m.t_matmul(&m).unwrap().symmetrize()).unwrap().values[0].sqrt();
            let got = spectral_norm_default(&m);
            assert!((got - oracle).abs() <= 1e-6 * oracle, "{got} vs {oracle}");
        }
    }

    #[test]
    fn psd_sqrt_examples() {
        let r = psd_sqrt(&Matrix::from_diag(&[4.0, 9.0])).unwrap();
        assert!(r.sub(&Matrix::from_diag(&[2.0, 3.0])).unwrap().max_abs() < 1e-14);
        let i = psd_sqrt(&Matrix::identity(5)).unwrap();
        assert!(i.sub(&Matrix::identity(5)).unwrap().max_abs() < 1e-14);
    }

    #[test]
    fn psd_sqrt_squares_back() {
        let j = random_matrix(6, 6, 9);
        let s = j.t_matmul(&j).unwrap();
        let r = psd_sqrt(&s).unwrap();
        let rr = r.matmul(&r).unwrap();
        assert!(rr.sub(&s).unwrap().max_abs() < 1e-7 * s.max_abs());
    }

    #[test]
    fn psd_sqrt_rejects_indefinite() {
        assert!(psd_sqrt(&Matrix::from_diag(&[1.0, -1.0])).is_err());
        // tiny negative eigenvalues are clipped
        let r = psd_sqrt(&Matrix::from_diag(&[1.0, -1e-9])).unwrap();
        assert_eq!(r[(1, 1)], 0.0);
    }

    #[test]
    fn singular_values_of_rectangular() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let c: f64 = rng.random_range(0.5..2.0);
        let m = Matrix::from_rows(&[[c, 0.0], [0.0, 2.0 * c], [0.0, 0.0]]).unwrap();
        let s = singular_values(&m).unwrap();
        assert!((s[0] - 2.0 * c).abs() < 1e-12 && (s[1] - c).abs() < 1e-12);
    }
}
