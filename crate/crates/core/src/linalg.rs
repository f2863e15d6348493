//! Dense vectors and matrices, matrix-free operators and Krylov solvers.
//!
//! Vectors are plain `Vec<T>` / `&[T]`; the free functions below cover the
//! handful of BLAS-1 style kernels the rest of the crate needs. Matrices are
//! row-major [`DenseMat`]. The likelihood-covariance systems built by the
//! posterior module are never materialized: they implement
//! [`LinearOperator`] and are handed to [`cg_solve`] or [`gmres_solve`].

use std::ops::{Index, IndexMut};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::scalar::{gemm, Scalar, Trans};

pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

pub fn norm<T: Scalar>(a: &[T]) -> T {
    dot(a, a).sqrt()
}

/// `y <- y + alpha * x`
pub fn axpy<T: Scalar>(alpha: T, x: &[T], y: &mut [T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub fn scale<T: Scalar>(alpha: T, x: &[T]) -> Vec<T> {
    x.iter().map(|&v| alpha * v).collect()
}

pub fn add<T: Scalar>(a: &[T], b: &[T]) -> Vec<T> {
    a.iter().zip(b).map(|(&x, &y)| x + y).collect()
}

pub fn sub<T: Scalar>(a: &[T], b: &[T]) -> Vec<T> {
    a.iter().zip(b).map(|(&x, &y)| x - y).collect()
}

pub fn all_finite<T: Scalar>(a: &[T]) -> bool {
    a.iter().all(|v| v.is_finite())
}

pub fn standard_normal_vec<T: Scalar, R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<T> {
    (0..n)
        .map(|_| T::lit(rng.sample::<f64, _>(StandardNormal)))
        .collect()
}

/// Row-major dense matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseMat<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> DenseMat<T> {
    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        check_dim("DenseMat::from_vec", rows * cols, data.len())?;
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            check_dim("DenseMat::from_rows", cols, r.len())?;
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_diag(&vec![T::one(); n])
    }

    pub fn from_diag(diag: &[T]) -> Self {
        let n = diag.len();
        let mut m = Self::zeros(n, n);
        for (i, &d) in diag.iter().enumerate() {
            m[(i, i)] = d;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn diag(&self) -> Vec<T> {
        (0..self.rows.min(self.cols))
            .map(|i| self[(i, i)])
            .collect()
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    /// `self * x`
    pub fn matvec(&self, x: &[T]) -> Vec<T> {
        assert_eq!(x.len(), self.cols, "matvec dimension mismatch");
        (0..self.rows).map(|i| dot(self.row(i), x)).collect()
    }

    /// `self^T * x`
    pub fn matvec_t(&self, x: &[T]) -> Vec<T> {
        assert_eq!(x.len(), self.rows, "matvec_t dimension mismatch");
        let mut out = vec![T::zero(); self.cols];
        for (i, &xi) in x.iter().enumerate() {
            axpy(xi, self.row(i), &mut out);
        }
        out
    }

    pub fn matmul(&self, other: &Self) -> Self {
        assert_eq!(self.cols, other.rows, "matmul dimension mismatch");
        let mut out = Self::zeros(self.rows, other.cols);
        gemm(
            Trans::No,
            Trans::No,
            self.rows,
            self.cols,
            other.cols,
            T::one(),
            &self.data,
            &other.data,
            T::zero(),
            &mut out.data,
        );
        out
    }

    /// `self * other^T`
    pub fn matmul_t(&self, other: &Self) -> Self {
        assert_eq!(self.cols, other.cols, "matmul_t dimension mismatch");
        let mut out = Self::zeros(self.rows, other.rows);
        gemm(
            Trans::No,
            Trans::Yes,
            self.rows,
            self.cols,
            other.rows,
            T::one(),
            &self.data,
            &other.data,
            T::zero(),
            &mut out.data,
        );
        out
    }

    pub fn add(&self, other: &Self) -> Self {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        Self {
            rows: self.rows,
            cols: self.cols,
            data: add(&self.data, &other.data),
        }
    }

    pub fn sub(&self, other: &Self) -> Self {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        Self {
            rows: self.rows,
            cols: self.cols,
            data: sub(&self.data, &other.data),
        }
    }

    pub fn scaled(&self, alpha: T) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: scale(alpha, &self.data),
        }
    }

    /// Adds `alpha * I` in place.
    pub fn add_diag(&mut self, alpha: T) {
        for i in 0..self.rows.min(self.cols) {
            self[(i, i)] += alpha;
        }
    }

    /// `self += alpha * u v^T`
    pub fn add_outer(&mut self, alpha: T, u: &[T], v: &[T]) {
        assert_eq!((u.len(), v.len()), (self.rows, self.cols));
        for (i, &ui) in u.iter().enumerate() {
            let row = &mut self.data[i * self.cols..(i + 1) * self.cols];
            axpy(alpha * ui, v, row);
        }
    }

    pub fn frobenius_norm(&self) -> T {
        norm(&self.data)
    }

    pub fn max_asymmetry(&self) -> T {
        let mut worst = T::zero();
        for i in 0..self.rows {
            for j in 0..i {
                worst = worst.max((self[(i, j)] - self[(j, i)]).abs());
            }
        }
        worst
    }

    /// `(self + self^T) / 2`
    pub fn symmetrized(&self) -> Self {
        let mut out = self.clone();
        let half = T::lit(0.5);
        for i in 0..self.rows {
            for j in 0..i {
                let v = half * (self[(i, j)] + self[(j, i)]);
                out[(i, j)] = v;
                out[(j, i)] = v;
            }
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        all_finite(&self.data)
    }
}

impl<T> Index<(usize, usize)> for DenseMat<T> {
    type Output = T;

    fn index(&self, (i, j): (usize, usize)) -> &T {
        &self.data[i * self.cols + j]
    }
}

impl<T> IndexMut<(usize, usize)> for DenseMat<T> {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut T {
        &mut self.data[i * self.cols + j]
    }
}

/// A linear map known only through its action on vectors.
pub trait LinearOperator<T: Scalar> {
    fn dim_in(&self) -> usize;
    fn dim_out(&self) -> usize;
    fn apply(&self, v: &[T]) -> Vec<T>;
}

impl<T: Scalar> LinearOperator<T> for DenseMat<T> {
    fn dim_in(&self) -> usize {
        self.cols
    }

    fn dim_out(&self) -> usize {
        self.rows
    }

    fn apply(&self, v: &[T]) -> Vec<T> {
        self.matvec(v)
    }
}

impl<T: Scalar, O: LinearOperator<T> + ?Sized> LinearOperator<T> for &O {
    fn dim_in(&self) -> usize {
        (**self).dim_in()
    }

    fn dim_out(&self) -> usize {
        (**self).dim_out()
    }

    fn apply(&self, v: &[T]) -> Vec<T> {
        (**self).apply(v)
    }
}

/// Square operator defined by a closure.
pub struct FnOperator<F> {
    dim: usize,
    f: F,
}

impl<F> FnOperator<F> {
    pub fn new(dim: usize, f: F) -> Self {
        Self { dim, f }
    }
}

impl<T: Scalar, F: Fn(&[T]) -> Vec<T>> LinearOperator<T> for FnOperator<F> {
    fn dim_in(&self) -> usize {
        self.dim
    }

    fn dim_out(&self) -> usize {
        self.dim
    }

    fn apply(&self, v: &[T]) -> Vec<T> {
        (self.f)(v)
    }
}

/// Largest `||op(a u + b v) - a op(u) - b op(v)|| / (||u|| + ||v||)` over
/// `probes` random Gaussian pairs.
pub fn linearity_defect<T: Scalar, R: Rng + ?Sized>(
    op: &dyn LinearOperator<T>,
    probes: usize,
    rng: &mut R,
) -> T {
    let n = op.dim_in();
    let mut worst = T::zero();
    for _ in 0..probes {
        let u: Vec<T> = standard_normal_vec(rng, n);
        let v: Vec<T> = standard_normal_vec(rng, n);
        let a = T::lit(rng.sample::<f64, _>(StandardNormal));
        let b = T::lit(rng.sample::<f64, _>(StandardNormal));
        let combo: Vec<T> = u.iter().zip(&v).map(|(&x, &y)| a * x + b * y).collect();
        let lhs = op.apply(&combo);
        let ou = op.apply(&u);
        let ov = op.apply(&v);
        let diff: Vec<T> = lhs
            .iter()
            .zip(ou.iter().zip(&ov))
            .map(|(&l, (&x, &y))| l - a * x - b * y)
            .collect();
        worst = worst.max(norm(&diff) / (norm(&u) + norm(&v)));
    }
    worst
}

/// Outcome of a Krylov solve.
#[derive(Clone, Debug)]
pub struct KrylovSolution<T> {
    pub solution: Vec<T>,
    /// `||r_0||` followed by the residual norm after each iteration.
    pub residual_norms: Vec<T>,
    /// The residual reached the requested tolerance.
    pub converged: bool,
    /// GMRES only: the Arnoldi process hit an invariant subspace.
    pub breakdown: bool,
    /// CG only: a search direction with `p^T M p <= 0` showed the operator is
    /// not positive definite; the solution is the iterate before that step.
    pub indefinite: bool,
}

impl<T: Scalar> KrylovSolution<T> {
    pub fn iterations(&self) -> usize {
        self.residual_norms.len().saturating_sub(1)
    }

    pub fn final_residual(&self) -> T {
        *self
            .residual_norms
            .last()
            .expect("at least r_0 is recorded")
    }
}

fn check_square_system<T: Scalar>(
    op: &dyn LinearOperator<T>,
    b: &[T],
    x0: Option<&[T]>,
) -> Result<Vec<T>> {
    let n = op.dim_in();
    check_dim("solver operator (square)", n, op.dim_out())?;
    check_dim("solver right-hand side", n, b.len())?;
    match x0 {
        Some(x0) => {
            check_dim("solver initial guess", n, x0.len())?;
            Ok(x0.to_vec())
        }
        None => Ok(vec![T::zero(); n]),
    }
}

fn non_finite(solver: &str, iteration: usize) -> Error {
    Error::NonFinite {
        context: solver.to_string(),
        iteration,
    }
}

/// Conjugate gradient for symmetric positive definite operators.
///
/// Runs at most `max_iters` iterations from `x0` (zero when `None`) and
/// returns as soon as `||r_i|| <= eps`. Truncating to a few iterations is the
/// intended use on approximately-SPD Jacobian systems.
pub fn cg_solve<T: Scalar>(
    op: &dyn LinearOperator<T>,
    b: &[T],
    x0: Option<&[T]>,
    max_iters: usize,
    eps: T,
) -> Result<KrylovSolution<T>> {
    let mut x = check_square_system(op, b, x0)?;
    let ax = op.apply(&x);
    let mut r = sub(b, &ax);
    let mut p = r.clone();
    let mut rr = dot(&r, &r);
    let mut residual_norms = vec![rr.sqrt()];
    if !rr.is_finite() {
        return Err(non_finite("conjugate gradient", 0));
    }

    for i in 0..max_iters {
        if rr.sqrt() <= eps {
            return Ok(KrylovSolution {
                solution: x,
                residual_norms,
                converged: true,
                breakdown: false,
                indefinite: false,
            });
        }
        let ap = op.apply(&p);
        let pap = dot(&p, &ap);
        if pap <= T::zero() {
            return Ok(KrylovSolution {
                solution: x,
                residual_norms,
                converged: false,
                breakdown: false,
                indefinite: true,
            });
        }
        let alpha = rr / pap;
        axpy(alpha, &p, &mut x);
        axpy(-alpha, &ap, &mut r);
        let rr_next = dot(&r, &r);
        if !(alpha.is_finite() && rr_next.is_finite()) || !all_finite(&x) {
            return Err(non_finite("conjugate gradient", i + 1));
        }
        let beta = rr_next / rr;
        for (pi, &ri) in p.iter_mut().zip(&r) {
            *pi = ri + beta * *pi;
        }
        rr = rr_next;
        residual_norms.push(rr.sqrt());
    }

    let converged = rr.sqrt() <= eps;
    Ok(KrylovSolution {
        solution: x,
        residual_norms,
        converged,
        breakdown: false,
        indefinite: false,
    })
}

/// Full (restart-free) GMRES with modified Gram-Schmidt Arnoldi and Givens
/// rotations. Iterations are capped at the system dimension.
pub fn gmres_solve<T: Scalar>(
    op: &dyn LinearOperator<T>,
    b: &[T],
    x0: Option<&[T]>,
    max_iters: usize,
    eps: T,
) -> Result<KrylovSolution<T>> {
    let mut x = check_square_system(op, b, x0)?;
    let n = x.len();
    let r0 = sub(b, &op.apply(&x));
    let beta = norm(&r0);
    if !beta.is_finite() {
        return Err(non_finite("GMRES", 0));
    }
    let mut residual_norms = vec![beta];
    if beta <= eps || n == 0 {
        return Ok(KrylovSolution {
            solution: x,
            residual_norms,
            converged: true,
            breakdown: false,
            indefinite: false,
        });
    }

    let m = max_iters.min(n);
    let mut basis: Vec<Vec<T>> = vec![scale(T::one() / beta, &r0)];
    // Column j of the (rotated) Hessenberg matrix, stored by column.
    let mut h: Vec<Vec<T>> = Vec::with_capacity(m);
    let mut cs: Vec<T> = Vec::with_capacity(m);
    let mut sn: Vec<T> = Vec::with_capacity(m);
    let mut g = vec![T::zero(); m + 1];
    g[0] = beta;
    let mut breakdown = false;
    let mut converged = false;
    let mut k = 0;

    for j in 0..m {
        let mut w = op.apply(&basis[j]);
        let mut col = vec![T::zero(); j + 2];
        for (i, v) in basis.iter().enumerate() {
            let hij = dot(&w, v);
            col[i] = hij;
            axpy(-hij, v, &mut w);
        }
        let h_next = norm(&w);
        col[j + 1] = h_next;
        if !all_finite(&col) {
            return Err(non_finite("GMRES", j + 1));
        }

        for i in 0..j {
            let (a, bb) = (col[i], col[i + 1]);
            col[i] = cs[i] * a + sn[i] * bb;
            col[i + 1] = -sn[i] * a + cs[i] * bb;
        }
        let (a, bb) = (col[j], col[j + 1]);
        let rho = a.hypot(bb);
        let (c, s) = if rho == T::zero() {
            (T::one(), T::zero())
        } else {
            (a / rho, bb / rho)
        };
        cs.push(c);
        sn.push(s);
        col[j] = rho;
        col[j + 1] = T::zero();
        g[j + 1] = -s * g[j];
        g[j] = c * g[j];
        h.push(col);
        k = j + 1;

        let res = g[j + 1].abs();
        residual_norms.push(res);

        let scale_ref = h[j][j].abs().max(beta) * T::epsilon() * T::lit(n as f64);
        if h_next <= scale_ref {
            breakdown = true;
            converged = res <= eps;
            break;
        }
        if res <= eps {
            converged = true;
            break;
        }
        basis.push(scale(T::one() / h_next, &w));
    }

    // Back-substitution on the k x k upper-triangular system.
    let mut y = vec![T::zero(); k];
    for i in (0..k).rev() {
        let mut acc = g[i];
        for l in i + 1..k {
            acc -= h[l][i] * y[l];
        }
        y[i] = acc / h[i][i];
    }
    for (yi, v) in y.iter().zip(&basis) {
        axpy(*yi, v, &mut x);
    }
    if !all_finite(&x) {
        return Err(non_finite("GMRES", k));
    }

    Ok(KrylovSolution {
        solution: x,
        residual_norms,
        converged,
        breakdown,
        indefinite: false,
    })
}

/// Lower-triangular Cholesky factor `L` with `L L^T = a`. Only the lower
/// triangle of `a` is read.
pub fn cholesky<T: Scalar>(a: &DenseMat<T>) -> Result<DenseMat<T>> {
    check_dim("cholesky (square)", a.rows(), a.cols())?;
    let n = a.rows();
    let mut l = DenseMat::zeros(n, n);
    for j in 0..n {
        let mut d = a[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if !(d > T::zero()) {
            return Err(Error::NotPositiveDefinite {
                pivot: j,
                value: d.to_f64_lossy(),
            });
        }
        let djj = d.sqrt();
        l[(j, j)] = djj;
        for i in j + 1..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / djj;
        }
    }
    Ok(l)
}

/// Solves `L z = b` for lower-triangular `L`.
pub fn solve_lower<T: Scalar>(l: &DenseMat<T>, b: &[T]) -> Vec<T> {
    let n = l.rows();
    let mut z = b.to_vec();
    for i in 0..n {
        let mut s = z[i];
        for k in 0..i {
            s -= l[(i, k)] * z[k];
        }
        z[i] = s / l[(i, i)];
    }
    z
}

/// Solves `L^T z = b` for lower-triangular `L`.
pub fn solve_lower_t<T: Scalar>(l: &DenseMat<T>, b: &[T]) -> Vec<T> {
    let n = l.rows();
    let mut z = b.to_vec();
    for i in (0..n).rev() {
        let mut s = z[i];
        for k in i + 1..n {
            s -= l[(k, i)] * z[k];
        }
        z[i] = s / l[(i, i)];
    }
    z
}

/// Solves `a x = b` given the Cholesky factor of `a`.
pub fn cholesky_solve<T: Scalar>(l: &DenseMat<T>, b: &[T]) -> Vec<T> {
    solve_lower_t(l, &solve_lower(l, b))
}

/// Inverse of an SPD matrix from its Cholesky factor.
pub fn cholesky_inverse<T: Scalar>(l: &DenseMat<T>) -> DenseMat<T> {
    let n = l.rows();
    let mut inv = DenseMat::zeros(n, n);
    let mut e = vec![T::zero(); n];
    for j in 0..n {
        e.iter_mut().for_each(|v| *v = T::zero());
        e[j] = T::one();
        let col = cholesky_solve(l, &e);
        for i in 0..n {
            inv[(i, j)] = col[i];
        }
    }
    inv.symmetrized()
}

/// `log det a` from the Cholesky factor of `a`.
pub fn cholesky_log_det<T: Scalar>(l: &DenseMat<T>) -> T {
    l.diag().iter().map(|d| d.ln()).sum::<T>() * T::lit(2.0)
}

/// Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.
///
/// Returns eigenvalues in descending order and the matching unit eigenvectors
/// as the columns of the returned matrix.
pub fn symmetric_eigen<T: Scalar>(a: &DenseMat<T>) -> Result<(Vec<T>, DenseMat<T>)> {
    check_dim("symmetric_eigen (square)", a.rows(), a.cols())?;
    let n = a.rows();
    let mut m = a.symmetrized();
    let mut v = DenseMat::identity(n);
    let total = m.frobenius_norm();
    let tol = T::epsilon() * total.max(T::min_positive_value());

    for _sweep in 0..100 {
        let mut off = T::zero();
        for i in 0..n {
            for j in 0..i {
                off += m[(i, j)] * m[(i, j)];
            }
        }
        if off.sqrt() <= tol {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[(p, q)];
                if apq.abs() <= T::min_positive_value() {
                    continue;
                }
                let theta = (m[(q, q)] - m[(p, p)]) / (T::lit(2.0) * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + T::one()).sqrt());
                let c = T::one() / (t * t + T::one()).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[(k, p)];
                    let mkq = m[(k, q)];
                    m[(k, p)] = c * mkp - s * mkq;
                    m[(k, q)] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[(p, k)];
                    let mqk = m[(q, k)];
                    m[(p, k)] = c * mpk - s * mqk;
                    m[(q, k)] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }
    if !m.is_finite() {
        return Err(non_finite("symmetric_eigen", 0));
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[(j, j)].partial_cmp(&m[(i, i)]).expect("finite"));
    let values = order.iter().map(|&i| m[(i, i)]).collect();
    let mut vectors = DenseMat::zeros(n, n);
    for (new, &old) in order.iter().enumerate() {
        for k in 0..n {
            vectors[(k, new)] = v[(k, old)];
        }
    }
    Ok((values, vectors))
}

/// `Q diag(values) Q^T` for orthonormal columns `Q`.
pub fn from_eigen<T: Scalar>(values: &[T], vectors: &DenseMat<T>) -> DenseMat<T> {
    let n = vectors.rows();
    let mut out = DenseMat::zeros(n, n);
    for (j, &lam) in values.iter().enumerate() {
        let col: Vec<T> = (0..n).map(|k| vectors[(k, j)]).collect();
        out.add_outer(lam, &col, &col);
    }
    out
}
