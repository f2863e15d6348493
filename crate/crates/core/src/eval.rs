//! Evaluation: debiased Sinkhorn divergences between point clouds,
//! importance-resampled approximate posteriors and the covariance-mode
//! comparison study on random manifolds.
//!
//! The divergence between weighted clouds `a` and `b` under the squared
//! Euclidean cost is
//!
//! ```text
//! S(a, b) = OT_eps(a, b) - OT_eps(a, a) / 2 - OT_eps(b, b) / 2
//! ```
//!
//! where `OT_eps` is the entropic transport cost (relative entropy to the
//! product measure), evaluated through its dual `<a, f> + <b, g>` at the
//! fixed point of the log-domain Sinkhorn iterations.

use std::cmp::Ordering;

use log::debug;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::gmm::{log_sum_exp, GmmPrior};
use crate::linalg::{
    cholesky, cholesky_log_det, cholesky_solve, from_eigen, symmetric_eigen, DenseMat,
};
use crate::manifold::{build_prior, random_sphere_rows, ManifoldCurve, Observation};
use crate::posterior::CovarianceMode;
use crate::rng::substream;
use crate::scalar::Scalar;

/// A finite, optionally weighted set of points in `R^dim`.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud<T> {
    dim: usize,
    points: Vec<T>,
    weights: Option<Vec<T>>,
}

impl<T: Scalar> PointCloud<T> {
    /// Uniformly weighted cloud from row-major `points`.
    pub fn new(dim: usize, points: Vec<T>) -> Result<Self> {
        if dim == 0 || points.is_empty() {
            return Err(Error::Domain(
                "point cloud must be non-empty with positive dimension".into(),
            ));
        }
        if !points.len().is_multiple_of(dim) {
            return Err(Error::DimensionMismatch {
                context: "point cloud storage (multiple of the dimension)",
                expected: dim * (points.len() / dim + 1),
                got: points.len(),
            });
        }
        Ok(Self {
            dim,
            points,
            weights: None,
        })
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        let mut points = Vec::with_capacity(rows.len() * dim);
        for r in rows {
            check_dim("point cloud row", dim, r.len())?;
            points.extend_from_slice(r);
        }
        Self::new(dim, points)
    }

    pub fn with_weights(mut self, weights: Vec<T>) -> Result<Self> {
        check_dim("point cloud weights", self.len(), weights.len())?;
        let total: T = weights.iter().copied().sum();
        if weights.iter().any(|w| !(*w >= T::zero())) || (total - T::one()).abs() > T::lit(1e-9) {
            return Err(Error::Domain(
                "point cloud weights must form a simplex".into(),
            ));
        }
        self.weights = Some(weights);
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.points.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn point(&self, i: usize) -> &[T] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }

    pub fn points(&self) -> &[T] {
        &self.points
    }

    pub fn weights(&self) -> Vec<T> {
        match &self.weights {
            Some(w) => w.clone(),
            None => vec![T::one() / T::lit(self.len() as f64); self.len()],
        }
    }

    fn log_weights(&self) -> Vec<T> {
        self.weights()
            .into_iter()
            .map(|w| {
                if w > T::zero() {
                    w.ln()
                } else {
                    T::neg_infinity()
                }
            })
            .collect()
    }

    /// Weighted mean and covariance.
    pub fn moments(&self) -> (Vec<T>, DenseMat<T>) {
        let w = self.weights();
        let mut mean = vec![T::zero(); self.dim];
        for (i, &wi) in w.iter().enumerate() {
            for (m, &x) in mean.iter_mut().zip(self.point(i)) {
                *m += wi * x;
            }
        }
        let mut cov = DenseMat::zeros(self.dim, self.dim);
        for (i, &wi) in w.iter().enumerate() {
            let d: Vec<T> = self
                .point(i)
                .iter()
                .zip(&mean)
                .map(|(&x, &m)| x - m)
                .collect();
            cov.add_outer(wi, &d, &d);
        }
        (mean, cov)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SinkhornConfig {
    /// Entropic regularization `eps` (absolute, in squared-distance units).
    pub reg: f64,
    /// Iteration cap for the final-`eps` stage of each transport problem.
    pub max_iters: usize,
    /// Target L1 violation of the row marginal.
    pub tolerance: f64,
    /// Geometric factor of the `eps`-annealing schedule of the cross
    /// problem, in (0, 1). Slow annealing is what makes small `eps` usable.
    pub scaling: f64,
}

impl Default for SinkhornConfig {
    fn default() -> Self {
        Self {
            reg: 1e-3,
            max_iters: 200,
            tolerance: 1e-9,
            scaling: 0.95,
        }
    }
}

impl SinkhornConfig {
    pub fn with_reg(reg: f64) -> Self {
        Self {
            reg,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.reg > 0.0 && self.reg.is_finite()) {
            return Err(Error::Config(format!(
                "Sinkhorn reg must be positive, got {}",
                self.reg
            )));
        }
        if !(self.scaling > 0.0 && self.scaling < 1.0) {
            return Err(Error::Config(format!(
                "Sinkhorn scaling must lie in (0, 1), got {}",
                self.scaling
            )));
        }
        if self.max_iters == 0 || !(self.tolerance > 0.0) {
            return Err(Error::Config(
                "Sinkhorn needs max_iters >= 1 and a positive tolerance".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SinkhornResult<T> {
    pub divergence: T,
    /// Largest final marginal violation over the three transport problems.
    pub violation: T,
    /// Total Sinkhorn iterations over the three problems.
    pub iterations: usize,
    /// False when a problem stopped at `max_iters` above the tolerance.
    pub converged: bool,
}

/// Squared-distance matrix, `a.len() x b.len()` row-major.
fn cost_matrix<T: Scalar>(a: &PointCloud<T>, b: &PointCloud<T>) -> Vec<T> {
    let (n, m) = (a.len(), b.len());
    let mut c = vec![T::zero(); n * m];
    c.par_chunks_mut(m).enumerate().for_each(|(i, row)| {
        let x = a.point(i);
        for (j, cij) in row.iter_mut().enumerate() {
            *cij = x
                .iter()
                .zip(b.point(j))
                .map(|(&p, &q)| (p - q) * (p - q))
                .sum();
        }
    });
    c
}

fn transpose<T: Scalar>(c: &[T], n: usize, m: usize) -> Vec<T> {
    let mut t = vec![T::zero(); n * m];
    for i in 0..n {
        for j in 0..m {
            t[j * n + i] = c[i * m + j];
        }
    }
    t
}

/// `out_i = -eps LSE_j(logw_j + (pot_j - c_ij) / eps)` over the rows of `c`.
fn softmin<T: Scalar>(c: &[T], cols: usize, eps: T, logw: &[T], pot: &[T], out: &mut [T]) {
    let inv = T::one() / eps;
    let shifted: Vec<T> = logw.iter().zip(pot).map(|(&lw, &p)| lw + p * inv).collect();
    out.par_iter_mut()
        .zip(c.par_chunks(cols))
        .for_each(|(o, row)| {
            let mut mx = T::neg_infinity();
            for (&s, &cij) in shifted.iter().zip(row) {
                mx = mx.max(s - cij * inv);
            }
            if mx == T::neg_infinity() {
                *o = T::infinity();
                return;
            }
            let sum: T = shifted
                .iter()
                .zip(row)
                .map(|(&s, &cij)| (s - cij * inv - mx).exp())
                .sum();
            *o = -eps * (mx + sum.ln());
        });
}

fn max_cost<T: Scalar>(c: &[T]) -> T {
    c.iter().copied().fold(T::zero(), T::max)
}

/// Annealing factor for self-transport, whose fixed point is reached in a
/// few iterations at any `eps`.
const SELF_SCALING: f64 = 0.5;

fn eps_schedule<T: Scalar>(diameter2: T, reg: f64, scaling: f64) -> Vec<T> {
    let reg = T::lit(reg);
    let factor = T::lit(scaling);
    let mut out = Vec::new();
    let mut eps = diameter2.max(reg);
    while eps > reg {
        out.push(eps);
        eps *= factor;
    }
    out.push(reg);
    out
}

fn dual_value<T: Scalar>(w: &[T], pot: &[T]) -> T {
    w.iter()
        .zip(pot)
        .filter(|(&wi, _)| wi > T::zero())
        .map(|(&wi, &p)| wi * p)
        .sum()
}

/// Marginal violation after a row update that moved the potential from
/// `old` to `new`: `sum_i a_i |1 - exp((old_i - new_i) / eps)|`.
fn violation<T: Scalar>(w: &[T], old: &[T], new: &[T], eps: T) -> T {
    w.iter()
        .zip(old.iter().zip(new))
        .filter(|(&wi, _)| wi > T::zero())
        .map(|(&wi, (&o, &n))| wi * (T::one() - ((o - n) / eps).exp()).abs())
        .sum()
}

#[derive(Clone)]
struct Transport<T> {
    value: T,
    violation: T,
    iterations: usize,
    converged: bool,
}

/// Over-relaxation factor of the final-`eps` Sinkhorn stage.
const RELAXATION: f64 = 1.8;

/// Consecutive violation increases after which the relaxed iteration falls
/// back to plain Sinkhorn updates.
const RELAXATION_PATIENCE: usize = 5;

/// Entropic OT between two clouds: `eps`-annealing, then over-relaxed
/// alternating updates at the target `eps`.
fn ot_cross<T: Scalar>(a: &PointCloud<T>, b: &PointCloud<T>, cfg: &SinkhornConfig) -> Transport<T> {
    let (n, m) = (a.len(), b.len());
    let c = cost_matrix(a, b);
    let ct = transpose(&c, n, m);
    let (la, lb) = (a.log_weights(), b.log_weights());
    let mut f = vec![T::zero(); n];
    let mut g = vec![T::zero(); m];
    let mut tf = vec![T::zero(); n];
    let mut tg = vec![T::zero(); m];
    let schedule = eps_schedule(max_cost(&c), cfg.reg, cfg.scaling);
    let reg = *schedule.last().expect("schedule ends at reg");
    let mut iterations = 0;
    for &eps in &schedule[..schedule.len() - 1] {
        softmin(&c, m, eps, &lb, &g, &mut f);
        softmin(&ct, n, eps, &la, &f, &mut g);
        iterations += 1;
    }
    let wa = a.weights();
    let tol = T::lit(cfg.tolerance);
    let mut omega = T::lit(RELAXATION);
    let mut viol = T::infinity();
    let mut increases = 0;
    for _ in 0..cfg.max_iters {
        softmin(&c, m, reg, &lb, &g, &mut tf);
        let v = violation(&wa, &f, &tf, reg);
        iterations += 1;
        if v < tol {
            viol = v;
            break;
        }
        increases = if v >= viol { increases + 1 } else { 0 };
        if increases >= RELAXATION_PATIENCE || !v.is_finite() {
            omega = T::one();
        }
        viol = v;
        let keep = T::one() - omega;
        f.iter_mut()
            .zip(&tf)
            .for_each(|(fi, &t)| *fi = keep * *fi + omega * t);
        softmin(&ct, n, reg, &la, &f, &mut tg);
        g.iter_mut()
            .zip(&tg)
            .for_each(|(gi, &t)| *gi = keep * *gi + omega * t);
    }
    // A final plain update pair leaves the column marginal exact.
    softmin(&c, m, reg, &lb, &g, &mut f);
    softmin(&ct, n, reg, &la, &f, &mut g);
    Transport {
        value: dual_value(&wa, &f) + dual_value(&b.weights(), &g),
        violation: viol,
        iterations,
        converged: viol < tol,
    }
}

/// Entropic OT of a cloud with itself via the averaged symmetric update.
fn ot_self<T: Scalar>(a: &PointCloud<T>, cfg: &SinkhornConfig) -> Transport<T> {
    let n = a.len();
    let c = cost_matrix(a, a);
    let la = a.log_weights();
    let wa = a.weights();
    let mut f = vec![T::zero(); n];
    let mut t = vec![T::zero(); n];
    let schedule = eps_schedule(max_cost(&c), cfg.reg, SELF_SCALING);
    let reg = *schedule.last().expect("schedule ends at reg");
    let half = T::lit(0.5);
    let mut iterations = 0;
    for &eps in &schedule[..schedule.len() - 1] {
        softmin(&c, n, eps, &la, &f, &mut t);
        f.iter_mut()
            .zip(&t)
            .for_each(|(fi, &ti)| *fi = half * (*fi + ti));
        iterations += 1;
    }
    let tol = T::lit(cfg.tolerance);
    let mut viol = T::infinity();
    for _ in 0..cfg.max_iters {
        softmin(&c, n, reg, &la, &f, &mut t);
        viol = violation(&wa, &f, &t, reg);
        f.iter_mut()
            .zip(&t)
            .for_each(|(fi, &ti)| *fi = half * (*fi + ti));
        iterations += 1;
        if viol < tol {
            break;
        }
    }
    Transport {
        value: T::lit(2.0) * dual_value(&wa, &f),
        violation: viol,
        iterations,
        converged: viol < tol,
    }
}

fn check_clouds<T: Scalar>(
    a: &PointCloud<T>,
    b: &PointCloud<T>,
    cfg: &SinkhornConfig,
) -> Result<()> {
    cfg.validate()?;
    check_dim("Sinkhorn cloud dimension", a.dim(), b.dim())
}

fn combine<T: Scalar>(ab: Transport<T>, aa: &Transport<T>, bb: &Transport<T>) -> SinkhornResult<T> {
    let half = T::lit(0.5);
    let result = SinkhornResult {
        divergence: ab.value - half * aa.value - half * bb.value,
        violation: ab.violation.max(aa.violation).max(bb.violation),
        iterations: ab.iterations + aa.iterations + bb.iterations,
        converged: ab.converged && aa.converged && bb.converged,
    };
    if !result.converged {
        debug!(
            "Sinkhorn stopped before reaching the marginal tolerance (violation {:e})",
            result.violation.to_f64_lossy()
        );
    }
    result
}

/// Debiased Sinkhorn divergence between two clouds.
pub fn sinkhorn_divergence<T: Scalar>(
    a: &PointCloud<T>,
    b: &PointCloud<T>,
    cfg: &SinkhornConfig,
) -> Result<SinkhornResult<T>> {
    check_clouds(a, b, cfg)?;
    let aa = ot_self(a, cfg);
    if a == b {
        return Ok(combine(aa.clone(), &aa, &aa));
    }
    let bb = ot_self(b, cfg);
    Ok(combine(cross_canonical(a, b, cfg), &aa, &bb))
}

/// Total order on clouds used to orient the cross problem, so that the
/// result does not depend on argument order.
fn cloud_order<T: Scalar>(a: &PointCloud<T>, b: &PointCloud<T>) -> Ordering {
    let key = |c: &PointCloud<T>| (c.dim, c.len());
    key(a).cmp(&key(b)).then_with(|| {
        let wa = a.weights();
        let wb = b.weights();
        a.points
            .iter()
            .chain(&wa)
            .zip(b.points.iter().chain(&wb))
            .map(|(x, y)| x.to_f64_lossy().total_cmp(&y.to_f64_lossy()))
            .find(|o| o.is_ne())
            .unwrap_or(Ordering::Equal)
    })
}

fn cross_canonical<T: Scalar>(
    a: &PointCloud<T>,
    b: &PointCloud<T>,
    cfg: &SinkhornConfig,
) -> Transport<T> {
    if cloud_order(a, b) == Ordering::Greater {
        ot_cross(b, a, cfg)
    } else {
        ot_cross(a, b, cfg)
    }
}

/// A reference cloud with its self-transport term precomputed, for comparing
/// many clouds against the same target.
pub struct SinkhornReference<'a, T> {
    cloud: &'a PointCloud<T>,
    cfg: SinkhornConfig,
    self_term: Transport<T>,
}

impl<'a, T: Scalar> SinkhornReference<'a, T> {
    pub fn new(cloud: &'a PointCloud<T>, cfg: &SinkhornConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cloud,
            cfg: cfg.clone(),
            self_term: ot_self(cloud, cfg),
        })
    }

    pub fn divergence(&self, a: &PointCloud<T>) -> Result<SinkhornResult<T>> {
        check_clouds(a, self.cloud, &self.cfg)?;
        if a == self.cloud {
            return Ok(combine(
                self.self_term.clone(),
                &self.self_term,
                &self.self_term,
            ));
        }
        let ab = cross_canonical(a, self.cloud, &self.cfg);
        let aa = ot_self(a, &self.cfg);
        Ok(combine(ab, &aa, &self.self_term))
    }
}

/// Systematic resampling: `n` indices from normalized `weights` using one
/// uniform draw.
pub fn systematic_resample<T: Scalar, R: Rng + ?Sized>(
    weights: &[T],
    n: usize,
    rng: &mut R,
) -> Vec<usize> {
    let step = 1.0 / n as f64;
    let mut u = rng.random::<f64>() * step;
    let mut out = Vec::with_capacity(n);
    let mut cum = 0.0;
    let mut j = 0;
    let last = weights.len() - 1;
    for _ in 0..n {
        while j < last && cum + weights[j].to_f64_lossy() <= u {
            cum += weights[j].to_f64_lossy();
            j += 1;
        }
        out.push(j);
        u += step;
    }
    out
}

/// Hilbert-curve index of a point on the integer grid `[0, 2^bits)^d`
/// (Skilling's transpose algorithm, bits interleaved most significant
/// first). Requires `d * bits <= 64`.
pub fn hilbert_index(coords: &[u32], bits: u32) -> u64 {
    let d = coords.len();
    assert!(
        d as u32 * bits <= 64 && bits >= 1,
        "Hilbert key does not fit in 64 bits"
    );
    let mut x = coords.to_vec();
    let m = 1u32 << (bits - 1);
    let mut q = m;
    while q > 1 {
        let p = q - 1;
        for i in 0..d {
            if x[i] & q != 0 {
                x[0] ^= p;
            } else {
                let t = (x[0] ^ x[i]) & p;
                x[0] ^= t;
                x[i] ^= t;
            }
        }
        q >>= 1;
    }
    for i in 1..d {
        x[i] ^= x[i - 1];
    }
    let mut t = 0;
    q = m;
    while q > 1 {
        if x[d - 1] & q != 0 {
            t ^= q - 1;
        }
        q >>= 1;
    }
    for xi in &mut x {
        *xi ^= t;
    }
    let mut key = 0u64;
    for bit in (0..bits).rev() {
        for xi in &x {
            key = (key << 1) | u64::from((xi >> bit) & 1);
        }
    }
    key
}

/// Permutation sorting `points` along a Hilbert curve over their bounding
/// box. Systematic resampling of Hilbert-ordered points maps small weight
/// changes to small displacements of the resampled cloud.
pub fn hilbert_order<T: Scalar>(points: &[Vec<T>]) -> Vec<usize> {
    let d = points.first().map_or(0, Vec::len);
    if d == 0 {
        return (0..points.len()).collect();
    }
    let bits = (64 / d as u32).min(16);
    let scale = ((1u64 << bits) - 1) as f64;
    let mut lo = vec![f64::INFINITY; d];
    let mut hi = vec![f64::NEG_INFINITY; d];
    for p in points {
        for k in 0..d {
            let v = p[k].to_f64_lossy();
            lo[k] = lo[k].min(v);
            hi[k] = hi[k].max(v);
        }
    }
    let keys: Vec<u64> = points
        .iter()
        .map(|p| {
            let coords: Vec<u32> = (0..d)
                .map(|k| {
                    let span = hi[k] - lo[k];
                    let u = if span > 0.0 {
                        (p[k].to_f64_lossy() - lo[k]) / span
                    } else {
                        0.0
                    };
                    (u * scale).round() as u32
                })
                .collect();
            hilbert_index(&coords, bits)
        })
        .collect();
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by_key(|&i| (keys[i], i));
    order
}

/// Normalized weights and effective sample size from log-weights.
pub fn normalize_log_weights<T: Scalar>(log_w: &[T]) -> Result<(Vec<T>, T)> {
    let lse = log_sum_exp(log_w);
    if !lse.is_finite() {
        return Err(Error::NonFinite {
            context: "importance weight normalizer".into(),
            iteration: 0,
        });
    }
    let w: Vec<T> = log_w.iter().map(|&l| (l - lse).exp()).collect();
    let ess = T::one() / w.iter().map(|&wi| wi * wi).sum::<T>();
    Ok((w, ess))
}

#[derive(Clone, Debug)]
pub struct Resampled<T> {
    pub cloud: PointCloud<T>,
    pub ess: T,
    pub proposals: usize,
}

/// Self-normalized importance resampling of `proposals` with `log_w`.
/// Fails when the effective sample size is below 1% of the proposals.
pub fn resample_weighted<T: Scalar, R: Rng + ?Sized>(
    proposals: &[Vec<T>],
    log_w: &[T],
    n: usize,
    rng: &mut R,
) -> Result<Resampled<T>> {
    resample_inner(proposals, log_w, n, rng, true)
}

fn resample_inner<T: Scalar, R: Rng + ?Sized>(
    proposals: &[Vec<T>],
    log_w: &[T],
    n: usize,
    rng: &mut R,
    guard: bool,
) -> Result<Resampled<T>> {
    check_dim("importance weights", proposals.len(), log_w.len())?;
    if n == 0 || proposals.is_empty() {
        return Err(Error::Domain(
            "resampling needs proposals and n >= 1".into(),
        ));
    }
    let (w, ess) = normalize_log_weights(log_w)?;
    if guard && low_ess(ess, proposals.len()) {
        return Err(Error::LowEffectiveSampleSize {
            ess: ess.to_f64_lossy(),
            proposals: proposals.len(),
        });
    }
    let idx = systematic_resample(&w, n, rng);
    let rows: Vec<Vec<T>> = idx.into_iter().map(|i| proposals[i].clone()).collect();
    Ok(Resampled {
        cloud: PointCloud::from_rows(&rows)?,
        ess,
        proposals: proposals.len(),
    })
}

fn low_ess<T: Scalar>(ess: T, proposals: usize) -> bool {
    ess < T::lit(0.01 * proposals as f64)
}

/// Per-proposal quantities shared by all covariance modes.
struct ProposalMoments<T> {
    mean: Vec<T>,
    cov: Option<DenseMat<T>>,
}

/// Covariance `V` substituted for `V[x | x_t]` by a heuristic mode, or `None`
/// for modes that need per-point information.
fn heuristic_covariance<T: Scalar>(
    prior: &GmmPrior<T>,
    sigma: T,
    mode: CovarianceMode,
) -> Result<Option<DenseMat<T>>> {
    let n = prior.dim();
    let s2 = sigma * sigma;
    Ok(match mode {
        CovarianceMode::Tweedie => None,
        CovarianceMode::SigmaT => Some(DenseMat::identity(n).scaled(s2)),
        CovarianceMode::ShrinkIdentity => Some(DenseMat::identity(n).scaled(s2 / (T::one() + s2))),
        CovarianceMode::ShrinkPrior => {
            let (values, vectors) = symmetric_eigen(&prior.covariance())?;
            let shrunk: Vec<T> = values.iter().map(|&l| l * s2 / (l + s2)).collect();
            Some(from_eigen(&shrunk, &vectors))
        }
        CovarianceMode::Dps => Some(DenseMat::zeros(n, n)),
    })
}

/// `log N(y; A m, sigma_y^2 I + A V A^T)` up to the mode-independent
/// constant.
fn gaussian_log_likelihood<T: Scalar>(
    obs: &Observation<T>,
    mean: &[T],
    v: &DenseMat<T>,
) -> Result<T> {
    let a = obs.a();
    let mut s = a.matmul(v).matmul_t(a);
    s.add_diag(obs.sigma_y() * obs.sigma_y());
    let l = cholesky(&s.symmetrized())?;
    let r: Vec<T> = obs
        .y()
        .iter()
        .zip(a.matvec(mean))
        .map(|(&y, am)| y - am)
        .collect();
    let sol = cholesky_solve(&l, &r);
    let quad: T = r.iter().zip(&sol).map(|(&ri, &si)| ri * si).sum();
    Ok(-T::lit(0.5) * (quad + cholesky_log_det(&l)))
}

fn proposal_moments<T: Scalar>(
    prior: &GmmPrior<T>,
    proposals: &[Vec<T>],
    sigma: T,
    need_cov: bool,
) -> Result<Vec<ProposalMoments<T>>> {
    proposals
        .par_iter()
        .map(|x| {
            let pm = prior.posterior_moments(x, sigma)?;
            Ok(ProposalMoments {
                mean: pm.mean,
                cov: need_cov.then_some(pm.cov),
            })
        })
        .collect()
}

fn mode_log_weights<T: Scalar>(
    prior: &GmmPrior<T>,
    obs: &Observation<T>,
    sigma: T,
    mode: CovarianceMode,
    moments: &[ProposalMoments<T>],
) -> Result<Vec<T>> {
    let fixed = heuristic_covariance(prior, sigma, mode)?;
    moments
        .par_iter()
        .map(|pm| {
            let v = match &fixed {
                Some(v) => v,
                None => pm
                    .cov
                    .as_ref()
                    .expect("per-point covariance computed for Tweedie mode"),
            };
            gaussian_log_likelihood(obs, &pm.mean, v)
        })
        .collect()
}

/// Draws `16 n` proposals `x_t ~ p(x_t)` and resamples `n` of them with
/// weights `q(y | x_t) = N(y; A E[x | x_t], sigma_y^2 I + A V A^T)`, with `V`
/// given by `mode`.
pub fn resample_approx_posterior<T: Scalar, R: Rng + ?Sized>(
    prior: &GmmPrior<T>,
    obs: &Observation<T>,
    sigma: T,
    mode: CovarianceMode,
    n: usize,
    rng: &mut R,
) -> Result<Resampled<T>> {
    check_dim(
        "observation latent dimension",
        prior.dim(),
        obs.latent_dim(),
    )?;
    if !(sigma > T::zero()) {
        return Err(Error::Domain(format!(
            "sigma must be positive, got {sigma}"
        )));
    }
    let proposals = prior.sample_xt(rng, PROPOSAL_FACTOR * n, sigma);
    let moments = proposal_moments(prior, &proposals, sigma, mode == CovarianceMode::Tweedie)?;
    let log_w = mode_log_weights(prior, obs, sigma, mode, &moments)?;
    resample_weighted(&proposals, &log_w, n, rng)
}

/// Proposals drawn per resampled point.
pub const PROPOSAL_FACTOR: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Fig2Config {
    pub n_manifolds: usize,
    pub sigmas: Vec<f64>,
    pub modes: Vec<CovarianceMode>,
    pub latent_dim: usize,
    pub curve_order: usize,
    pub k_mix: usize,
    pub bandwidth: f64,
    pub sigma_y: f64,
    /// Points per compared cloud.
    pub points: usize,
    /// Extra rounds of 4x proposals when an effective sample size is too
    /// low. After the last round the approximate clouds are resampled anyway
    /// and the cell reports its effective sample size.
    pub proposal_retries: usize,
    pub sinkhorn: SinkhornConfig,
    pub seed: u64,
}

impl Default for Fig2Config {
    fn default() -> Self {
        Self {
            n_manifolds: 64,
            sigmas: log_grid(1e-2, 1e1, 8),
            modes: CovarianceMode::ALL.to_vec(),
            latent_dim: 3,
            curve_order: 4,
            k_mix: 256,
            bandwidth: 0.05,
            sigma_y: 1e-2,
            points: 1024,
            proposal_retries: 2,
            sinkhorn: SinkhornConfig::default(),
            seed: 0,
        }
    }
}

impl Fig2Config {
    pub fn validate(&self) -> Result<()> {
        self.sinkhorn.validate()?;
        if self.n_manifolds == 0 || self.sigmas.is_empty() || self.modes.is_empty() {
            return Err(Error::Config(
                "the study needs manifolds, sigmas and modes".into(),
            ));
        }
        if self.sigmas.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::Config("study sigmas must be positive".into()));
        }
        if self.points < 256 {
            return Err(Error::Config(format!(
                "clouds need at least 256 points, got {}",
                self.points
            )));
        }
        if self.latent_dim > 5 {
            return Err(Error::Config(
                "importance resampling is limited to latent_dim <= 5".into(),
            ));
        }
        if !(self.sigma_y > 0.0) || !(self.bandwidth > 0.0) {
            return Err(Error::Config(
                "sigma_y and bandwidth must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// `count` log-spaced values from `lo` to `hi` inclusive.
pub fn log_grid(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    if count == 1 {
        return vec![lo];
    }
    let (a, b) = (lo.ln(), hi.ln());
    (0..count)
        .map(|i| (a + (b - a) * i as f64 / (count - 1) as f64).exp())
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Fig2Cell {
    pub manifold: usize,
    pub sigma: f64,
    pub mode: CovarianceMode,
    pub divergence: f64,
    pub ess: f64,
    pub proposals: usize,
    pub converged: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Fig2Row {
    pub sigma: f64,
    pub mode: CovarianceMode,
    pub p25: f64,
    pub p50: f64,
    pub p75: f64,
    /// Median effective sample size over manifolds.
    pub ess: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Fig2Table {
    pub seed: u64,
    pub cells: Vec<Fig2Cell>,
    pub rows: Vec<Fig2Row>,
}

impl Fig2Table {
    pub fn row(&self, sigma: f64, mode: CovarianceMode) -> Option<&Fig2Row> {
        self.rows
            .iter()
            .find(|r| r.sigma == sigma && r.mode == mode)
    }

    /// Summary CSV: one row per `(sigma, mode)`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("manifold_seed,sigma,mode,p25,p50,p75,ess\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{:e},{},{:e},{:e},{:e},{:.1}\n",
                self.seed, r.sigma, r.mode, r.p25, r.p50, r.p75, r.ess
            ));
        }
        out
    }

    /// Per-cell CSV: one row per `(manifold, sigma, mode)`.
    pub fn cells_csv(&self) -> String {
        let mut out = String::from("manifold,sigma,mode,divergence,ess,proposals,converged\n");
        for c in &self.cells {
            out.push_str(&format!(
                "{},{:e},{},{:e},{:.1},{},{}\n",
                c.manifold, c.sigma, c.mode, c.divergence, c.ess, c.proposals, c.converged
            ));
        }
        out
    }
}

/// Linear-interpolation quantile of an ascending slice.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of an empty slice");
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// The random manifold prior and observation used for study manifold `index`.
pub fn fig2_problem(cfg: &Fig2Config, index: usize) -> Result<(GmmPrior<f64>, Observation<f64>)> {
    let curve = ManifoldCurve::generate(
        cfg.latent_dim,
        cfg.curve_order,
        &mut substream(cfg.seed, "fig2-manifold", index as u64),
    )?;
    let prior = build_prior(&curve, cfg.k_mix, cfg.bandwidth)?;
    let mut rng = substream(cfg.seed, "fig2-observation", index as u64);
    let a: DenseMat<f64> = random_sphere_rows(&mut rng, 1, cfg.latent_dim);
    let x = prior.sample_prior(&mut rng, 1).remove(0);
    let y: Vec<f64> = a
        .matvec(&x)
        .into_iter()
        .map(|v| v + cfg.sigma_y * rng.sample::<f64, _>(rand_distr::StandardNormal))
        .collect();
    Ok((prior, Observation::new(y, a, cfg.sigma_y)?))
}

/// Log of the exact likelihood `p(y | x_t)` up to a constant, as the
/// density ratio `p(x_t | y) / p(x_t)`.
fn exact_log_weights(
    prior: &GmmPrior<f64>,
    obs: &Observation<f64>,
    sigma: f64,
    proposals: &[Vec<f64>],
) -> Result<Vec<f64>> {
    let exact = prior.exact_diffused_posterior(obs, sigma)?;
    proposals
        .par_iter()
        .map(|x| Ok(exact.log_density(x)? - prior.log_p_xt(x, sigma)?))
        .collect()
}

fn fig2_cells(cfg: &Fig2Config, manifold: usize, sigma_index: usize) -> Result<Vec<Fig2Cell>> {
    let (prior, obs) = fig2_problem(cfg, manifold)?;
    let sigma = cfg.sigmas[sigma_index];
    let cell_id = (manifold * cfg.sigmas.len() + sigma_index) as u64;
    let mut rng = substream(cfg.seed, "fig2-cell", cell_id);
    let resample_rng = substream(cfg.seed, "fig2-resample", cell_id);
    let need_cov = cfg.modes.contains(&CovarianceMode::Tweedie);

    let mut factor = PROPOSAL_FACTOR;
    let mut attempt = 0;
    let (reference, resampled) = loop {
        let last = attempt == cfg.proposal_retries;
        let drawn = prior.sample_xt(&mut rng, factor * cfg.points, sigma);
        let proposals: Vec<Vec<f64>> = hilbert_order(&drawn)
            .into_iter()
            .map(|i| drawn[i].clone())
            .collect();
        let log_exact = exact_log_weights(&prior, &obs, sigma, &proposals)?;
        let moments = proposal_moments(&prior, &proposals, sigma, need_cov)?;
        // Every cloud reuses the Hilbert-ordered proposals and the resampling
        // uniform, so the clouds differ only through their weights.
        let outcome = resample_weighted(
            &proposals,
            &log_exact,
            cfg.points,
            &mut resample_rng.clone(),
        )
        .and_then(|reference| {
            let clouds = cfg
                .modes
                .iter()
                .map(|&mode| {
                    let log_w = mode_log_weights(&prior, &obs, sigma, mode, &moments)?;
                    resample_inner(
                        &proposals,
                        &log_w,
                        cfg.points,
                        &mut resample_rng.clone(),
                        !last,
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            Ok((reference, clouds))
        });
        match outcome {
            Err(Error::LowEffectiveSampleSize { .. }) if !last => {
                attempt += 1;
                factor *= 4;
            }
            other => break other?,
        }
    };

    let target = SinkhornReference::new(&reference.cloud, &cfg.sinkhorn)?;
    cfg.modes
        .iter()
        .zip(resampled)
        .map(|(&mode, r)| {
            let d = target.divergence(&r.cloud)?;
            Ok(Fig2Cell {
                manifold,
                sigma,
                mode,
                divergence: d.divergence,
                ess: r.ess,
                proposals: r.proposals,
                converged: d.converged,
            })
        })
        .collect()
}

/// Divergence between approximate and exact diffused posteriors over random
/// 1-d manifolds, summarized as 25/50/75 percentiles per `(sigma, mode)`.
pub fn figure2_study(cfg: &Fig2Config) -> Result<Fig2Table> {
    cfg.validate()?;
    let tasks: Vec<(usize, usize)> = (0..cfg.n_manifolds)
        .flat_map(|m| (0..cfg.sigmas.len()).map(move |s| (m, s)))
        .collect();
    let per_task: Vec<Vec<Fig2Cell>> = tasks
        .par_iter()
        .map(|&(m, s)| fig2_cells(cfg, m, s))
        .collect::<Result<_>>()?;
    let cells: Vec<Fig2Cell> = per_task.into_iter().flatten().collect();

    let mut rows = Vec::with_capacity(cfg.sigmas.len() * cfg.modes.len());
    for &sigma in &cfg.sigmas {
        for &mode in &cfg.modes {
            let mut div: Vec<f64> = Vec::new();
            let mut ess: Vec<f64> = Vec::new();
            for c in cells.iter().filter(|c| c.sigma == sigma && c.mode == mode) {
                div.push(c.divergence);
                ess.push(c.ess);
            }
            div.sort_by(f64::total_cmp);
            ess.sort_by(f64::total_cmp);
            rows.push(Fig2Row {
                sigma,
                mode,
                p25: quantile(&div, 0.25),
                p50: quantile(&div, 0.5),
                p75: quantile(&div, 0.75),
                ess: quantile(&ess, 0.5),
            });
        }
    }
    Ok(Fig2Table {
        seed: cfg.seed,
        cells,
        rows,
    })
}
