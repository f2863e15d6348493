//! Posterior scores `grad log p(x_t | y)` for linear-Gaussian observations
//! `y = A x + sigma_y z`.
//!
//! The score splits into the prior term `(x_hat - x_t) / sigma^2` and the
//! likelihood term `J^T A^T u`, where `x_hat = E[x | x_t]`, `J` is the
//! Jacobian of `x_hat` and `u` solves
//!
//! ```text
//! (sigma_y^2 I + A V A^T) u = y - A x_hat
//! ```
//!
//! with `V` either the Tweedie covariance `sigma^2 J`, one of the heuristic
//! substitutes, or zero. The system is `m x m` and is solved matrix-free by a
//! truncated Krylov method.
//!
//! Everything is batched: a [`ScoreSource`] linearizes many chains at one
//! noise level, and the conjugate-gradient iterations of all chains advance in
//! lockstep so that network evaluations run as matrix products.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::gmm::GmmPrior;
use crate::linalg::{
    axpy, dot, gmres_solve, norm, standard_normal_vec, symmetric_eigen, DenseMat, LinearOperator,
};
use crate::manifold::Observation;
use crate::net::{DenoiserLinearization, DenoiserModel};
use crate::scalar::Scalar;

/// Model of `V[x | x_t]` inside the likelihood approximation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovarianceMode {
    /// `sigma^2 J`, applied through vector-Jacobian products.
    Tweedie,
    /// `sigma^2 I`.
    SigmaT,
    /// `(I + sigma^{-2} I)^{-1}`.
    ShrinkIdentity,
    /// `(Sigma_x^{-1} + sigma^{-2} I)^{-1}` for a configured `Sigma_x`.
    ShrinkPrior,
    /// Zero covariance.
    Dps,
}

impl CovarianceMode {
    pub const ALL: [CovarianceMode; 5] = [
        CovarianceMode::Tweedie,
        CovarianceMode::SigmaT,
        CovarianceMode::ShrinkIdentity,
        CovarianceMode::ShrinkPrior,
        CovarianceMode::Dps,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CovarianceMode::Tweedie => "tweedie",
            CovarianceMode::SigmaT => "sigma_t",
            CovarianceMode::ShrinkIdentity => "shrink_identity",
            CovarianceMode::ShrinkPrior => "shrink_prior",
            CovarianceMode::Dps => "dps",
        }
    }
}

impl fmt::Display for CovarianceMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CovarianceMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown covariance mode {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Solver {
    #[default]
    Cg,
    Gmres,
}

impl Solver {
    pub fn name(self) -> &'static str {
        match self {
            Solver::Cg => "cg",
            Solver::Gmres => "gmres",
        }
    }
}

impl fmt::Display for Solver {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Solver {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cg" => Ok(Solver::Cg),
            "gmres" => Ok(Solver::Gmres),
            _ => Err(Error::Config(format!("unknown solver {s:?}"))),
        }
    }
}

/// `Sigma_x` stored by its eigendecomposition.
#[derive(Clone, Debug, PartialEq)]
pub struct PriorCovariance<T> {
    values: Vec<T>,
    vectors: DenseMat<T>,
}

impl<T: Scalar> PriorCovariance<T> {
    pub fn new(cov: &DenseMat<T>) -> Result<Self> {
        let (values, vectors) = symmetric_eigen(cov)?;
        let min = values.last().copied().unwrap_or_else(T::zero);
        if !(min > T::zero()) {
            return Err(Error::NotPositiveDefinite {
                pivot: values.len().saturating_sub(1),
                value: min.to_f64_lossy(),
            });
        }
        Ok(Self { values, vectors })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    /// `Q diag(f(lambda)) Q^T v`.
    fn apply_spectral(&self, v: &[T], f: impl Fn(T) -> T) -> Vec<T> {
        let coords = self.vectors.matvec_t(v);
        let scaled: Vec<T> = coords
            .iter()
            .zip(&self.values)
            .map(|(&c, &l)| c * f(l))
            .collect();
        self.vectors.matvec(&scaled)
    }
}

#[derive(Clone, Debug)]
pub struct PosteriorScoreConfig<T> {
    pub mode: CovarianceMode,
    pub solver: Solver,
    pub solver_iters: usize,
    /// Early exit once the residual norm is at most this value.
    pub solver_eps: T,
    /// Required for [`CovarianceMode::ShrinkPrior`].
    pub prior_cov: Option<Arc<PriorCovariance<T>>>,
}

impl<T: Scalar> Default for PosteriorScoreConfig<T> {
    fn default() -> Self {
        Self {
            mode: CovarianceMode::Tweedie,
            solver: Solver::Cg,
            solver_iters: 3,
            solver_eps: T::zero(),
            prior_cov: None,
        }
    }
}

impl<T: Scalar> PosteriorScoreConfig<T> {
    pub fn with_mode(mode: CovarianceMode) -> Self {
        Self {
            mode,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.solver_iters == 0 {
            return Err(Error::Config("solver_iters must be at least 1".into()));
        }
        if !(self.solver_eps >= T::zero()) {
            return Err(Error::Config("solver_eps must be non-negative".into()));
        }
        if self.mode == CovarianceMode::ShrinkPrior && self.prior_cov.is_none() {
            return Err(Error::Config(
                "shrink_prior mode needs a prior covariance".into(),
            ));
        }
        Ok(())
    }
}

/// A batch of denoiser evaluations `x_hat_b = E[x | x_t = x_b]` at one noise
/// level, with row-wise vector-Jacobian products.
pub trait Linearization<T: Scalar> {
    fn batch(&self) -> usize;
    /// `batch x N`, row-major.
    fn means(&self) -> &[T];
    /// Row-wise `v_b^T J_b` for a `batch x N` cotangent.
    fn vjp(&self, v: &[T]) -> Vec<T>;
}

/// Anything that provides `E[x | x_t]` and its Jacobian.
pub trait ScoreSource<T: Scalar>: Sync {
    fn dim(&self) -> usize;
    /// Linearizes at the rows of `xs` (`batch x N`), all at level `sigma`.
    fn linearize<'a>(&'a self, xs: &[T], sigma: T) -> Result<Box<dyn Linearization<T> + 'a>>;
}

impl<T: Scalar> Linearization<T> for DenoiserLinearization<'_, T> {
    fn batch(&self) -> usize {
        DenoiserLinearization::batch(self)
    }

    fn means(&self) -> &[T] {
        self.mean()
    }

    fn vjp(&self, v: &[T]) -> Vec<T> {
        DenoiserLinearization::vjp(self, v).expect("cotangent shape checked by the caller")
    }
}

impl<T: Scalar> ScoreSource<T> for DenoiserModel<T> {
    fn dim(&self) -> usize {
        self.data_dim()
    }

    fn linearize<'a>(&'a self, xs: &[T], sigma: T) -> Result<Box<dyn Linearization<T> + 'a>> {
        let batch = xs.len() / self.data_dim().max(1);
        Ok(Box::new(self.linearize_batch(xs, &vec![sigma; batch])?))
    }
}

/// Linearization with explicit symmetric Jacobians.
struct DenseLinearization<T> {
    dim: usize,
    means: Vec<T>,
    jacobians: Vec<DenseMat<T>>,
}

impl<T: Scalar> Linearization<T> for DenseLinearization<T> {
    fn batch(&self) -> usize {
        self.jacobians.len()
    }

    fn means(&self) -> &[T] {
        &self.means
    }

    fn vjp(&self, v: &[T]) -> Vec<T> {
        v.chunks(self.dim)
            .zip(&self.jacobians)
            .flat_map(|(vb, j)| j.matvec_t(vb))
            .collect()
    }
}

fn check_batch<T: Scalar>(dim: usize, xs: &[T], sigma: T) -> Result<usize> {
    if dim == 0 || !xs.len().is_multiple_of(dim) {
        return Err(Error::DimensionMismatch {
            context: "linearization batch",
            expected: dim,
            got: xs.len(),
        });
    }
    if !(sigma > T::zero()) || !sigma.is_finite() {
        return Err(Error::Domain(format!(
            "noise level must be positive, got {sigma}"
        )));
    }
    Ok(xs.len() / dim)
}

/// The exact mixture denoiser: `J = V[x | x_t] / sigma^2`.
impl<T: Scalar> ScoreSource<T> for GmmPrior<T> {
    fn dim(&self) -> usize {
        GmmPrior::dim(self)
    }

    fn linearize<'a>(&'a self, xs: &[T], sigma: T) -> Result<Box<dyn Linearization<T> + 'a>> {
        let n = GmmPrior::dim(self);
        let batch = check_batch(n, xs, sigma)?;
        let mut means = Vec::with_capacity(xs.len());
        let mut jacobians = Vec::with_capacity(batch);
        for x in xs.chunks(n) {
            let m = self.posterior_moments(x, sigma)?;
            means.extend(m.mean);
            jacobians.push(m.cov.scaled(T::one() / (sigma * sigma)));
        }
        Ok(Box::new(DenseLinearization {
            dim: n,
            means,
            jacobians,
        }))
    }
}

/// Exact denoiser of a Gaussian prior `N(mu, Sigma)`:
/// `E[x | x_t] = mu + Sigma (Sigma + sigma^2 I)^{-1} (x_t - mu)`.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianSource<T> {
    mean: Vec<T>,
    cov: PriorCovariance<T>,
}

impl<T: Scalar> GaussianSource<T> {
    pub fn new(mean: Vec<T>, cov: &DenseMat<T>) -> Result<Self> {
        check_dim("Gaussian source covariance", mean.len(), cov.rows())?;
        Ok(Self {
            mean,
            cov: PriorCovariance::new(cov)?,
        })
    }

    pub fn mean(&self) -> &[T] {
        &self.mean
    }

    fn gain(&self, v: &[T], sigma: T) -> Vec<T> {
        let s2 = sigma * sigma;
        self.cov.apply_spectral(v, |l| l / (l + s2))
    }
}

struct GaussianLinearization<'a, T> {
    source: &'a GaussianSource<T>,
    sigma: T,
    means: Vec<T>,
}

impl<T: Scalar> Linearization<T> for GaussianLinearization<'_, T> {
    fn batch(&self) -> usize {
        self.means.len() / self.source.mean.len()
    }

    fn means(&self) -> &[T] {
        &self.means
    }

    fn vjp(&self, v: &[T]) -> Vec<T> {
        v.chunks(self.source.mean.len())
            .flat_map(|vb| self.source.gain(vb, self.sigma))
            .collect()
    }
}

impl<T: Scalar> ScoreSource<T> for GaussianSource<T> {
    fn dim(&self) -> usize {
        self.mean.len()
    }

    fn linearize<'a>(&'a self, xs: &[T], sigma: T) -> Result<Box<dyn Linearization<T> + 'a>> {
        let n = self.mean.len();
        check_batch(n, xs, sigma)?;
        let mut means = Vec::with_capacity(xs.len());
        for x in xs.chunks(n) {
            let d: Vec<T> = x.iter().zip(&self.mean).map(|(&a, &b)| a - b).collect();
            let g = self.gain(&d, sigma);
            means.extend(self.mean.iter().zip(&g).map(|(&m, &gi)| m + gi));
        }
        Ok(Box::new(GaussianLinearization {
            source: self,
            sigma,
            means,
        }))
    }
}

/// `(sigma_y^2 I + A V A^T)` for every chain of a linearized batch, as one
/// block-diagonal operator on the concatenated observation vectors.
pub struct LikelihoodCovOperator<'a, T: Scalar> {
    lin: &'a dyn Linearization<T>,
    obs: Vec<&'a Observation<T>>,
    offsets: Vec<usize>,
    dim: usize,
    sigma: T,
    mode: CovarianceMode,
    prior_cov: Option<&'a PriorCovariance<T>>,
}

impl<'a, T: Scalar> LikelihoodCovOperator<'a, T> {
    pub fn new(
        lin: &'a dyn Linearization<T>,
        obs: &[&'a Observation<T>],
        sigma: T,
        mode: CovarianceMode,
        prior_cov: Option<&'a PriorCovariance<T>>,
    ) -> Result<Self> {
        check_dim("observations per chain", lin.batch(), obs.len())?;
        let dim = if lin.batch() == 0 {
            0
        } else {
            lin.means().len() / lin.batch()
        };
        let mut offsets = Vec::with_capacity(obs.len() + 1);
        offsets.push(0);
        for o in obs {
            check_dim("observation latent dimension", dim, o.latent_dim())?;
            offsets.push(offsets.last().expect("non-empty") + o.obs_dim());
        }
        if mode == CovarianceMode::ShrinkPrior {
            match prior_cov {
                Some(c) => check_dim("prior covariance", dim, c.dim())?,
                None => {
                    return Err(Error::Config(
                        "shrink_prior mode needs a prior covariance".into(),
                    ))
                }
            }
        }
        if !(sigma > T::zero()) || !sigma.is_finite() {
            return Err(Error::Domain(format!(
                "noise level must be positive, got {sigma}"
            )));
        }
        Ok(Self {
            lin,
            obs: obs.to_vec(),
            offsets,
            dim,
            sigma,
            mode,
            prior_cov,
        })
    }

    /// Chain `b`'s slice of a concatenated observation-space vector.
    pub fn block<'v>(&self, v: &'v [T], b: usize) -> &'v [T] {
        &v[self.offsets[b]..self.offsets[b + 1]]
    }

    fn apply_v(&self, w: &[T]) -> Vec<T> {
        let s2 = self.sigma * self.sigma;
        match self.mode {
            CovarianceMode::Tweedie => self.lin.vjp(w).into_iter().map(|x| s2 * x).collect(),
            CovarianceMode::SigmaT => w.iter().map(|&x| s2 * x).collect(),
            CovarianceMode::ShrinkIdentity => {
                let c = s2 / (T::one() + s2);
                w.iter().map(|&x| c * x).collect()
            }
            CovarianceMode::ShrinkPrior => {
                let pc = self.prior_cov.expect("checked at construction");
                w.chunks(self.dim)
                    .flat_map(|wb| pc.apply_spectral(wb, |l| l * s2 / (l + s2)))
                    .collect()
            }
            CovarianceMode::Dps => vec![T::zero(); w.len()],
        }
    }
}

impl<T: Scalar> LinearOperator<T> for LikelihoodCovOperator<'_, T> {
    fn dim_in(&self) -> usize {
        *self.offsets.last().expect("non-empty")
    }

    fn dim_out(&self) -> usize {
        self.dim_in()
    }

    fn apply(&self, v: &[T]) -> Vec<T> {
        let w: Vec<T> = self
            .obs
            .iter()
            .enumerate()
            .flat_map(|(b, o)| o.a().matvec_t(self.block(v, b)))
            .collect();
        let vw = self.apply_v(&w);
        let mut out = Vec::with_capacity(v.len());
        for (b, o) in self.obs.iter().enumerate() {
            let s2y = o.sigma_y() * o.sigma_y();
            let avw = o.a().matvec(&vw[b * self.dim..(b + 1) * self.dim]);
            out.extend(
                self.block(v, b)
                    .iter()
                    .zip(avw)
                    .map(|(&vi, x)| s2y * vi + x),
            );
        }
        out
    }
}

/// Conjugate gradient run independently per block of a block-diagonal
/// operator, with every block advancing in lockstep. Each block follows
/// the iteration of [`cg_solve`]; blocks that reach `eps` stop updating.
///
/// A positive semi-definite covariance gives `p^T M p >= sigma_y^2 |p|^2`
/// along every direction. A block whose search direction falls below that
/// bound has an indefinite covariance term and is reported as failed, as is
/// a block whose iterates went non-finite. Returns per-block solutions or
/// the failing iteration.
fn lockstep_cg<T: Scalar>(
    op: &LikelihoodCovOperator<'_, T>,
    rhs: &[T],
    max_iters: usize,
    eps: T,
) -> Vec<std::result::Result<Vec<T>, usize>> {
    let nb = op.obs.len();
    let mut x = vec![T::zero(); rhs.len()];
    let mut r = rhs.to_vec();
    let mut p = r.clone();
    let mut rr: Vec<T> = (0..nb)
        .map(|b| dot(op.block(&r, b), op.block(&r, b)))
        .collect();
    let mut failed: Vec<Option<usize>> = rr.iter().map(|v| (!v.is_finite()).then_some(0)).collect();
    let mut active: Vec<bool> = failed.iter().map(Option::is_none).collect();

    for i in 0..max_iters {
        for b in 0..nb {
            if active[b] && rr[b].sqrt() <= eps {
                active[b] = false;
            }
        }
        if !active.iter().any(|&a| a) {
            break;
        }
        let ap = op.apply(&p);
        for b in 0..nb {
            if !active[b] {
                continue;
            }
            let (lo, hi) = (op.offsets[b], op.offsets[b + 1]);
            let pap = dot(&p[lo..hi], &ap[lo..hi]);
            let s2y = op.obs[b].sigma_y() * op.obs[b].sigma_y();
            if !(pap > s2y * dot(&p[lo..hi], &p[lo..hi])) {
                failed[b] = Some(i + 1);
                active[b] = false;
                continue;
            }
            let alpha = rr[b] / pap;
            axpy(alpha, &p[lo..hi], &mut x[lo..hi]);
            axpy(-alpha, &ap[lo..hi], &mut r[lo..hi]);
            let rr_next = dot(&r[lo..hi], &r[lo..hi]);
            if !(alpha.is_finite() && rr_next.is_finite())
                || x[lo..hi].iter().any(|v| !v.is_finite())
            {
                failed[b] = Some(i + 1);
                active[b] = false;
                continue;
            }
            let beta = rr_next / rr[b];
            for (pi, &ri) in p[lo..hi].iter_mut().zip(&r[lo..hi]) {
                *pi = ri + beta * *pi;
            }
            rr[b] = rr_next;
        }
    }
    (0..nb)
        .map(|b| match failed[b] {
            Some(it) => Err(it),
            None => Ok(op.block(&x, b).to_vec()),
        })
        .collect()
}

fn diverged(solver: &'static str, mode: CovarianceMode, iteration: usize) -> Error {
    Error::SolverDiverged {
        solver,
        mode: mode.name().to_string(),
        iteration,
    }
}

/// Solves one chain's system, falling back from CG to GMRES when CG produces
/// non-finite iterates or finds the covariance term indefinite.
fn solve_single<T: Scalar>(
    op: &LikelihoodCovOperator<'_, T>,
    rhs: &[T],
    cfg: &PosteriorScoreConfig<T>,
) -> Result<Vec<T>> {
    if cfg.solver == Solver::Cg {
        match lockstep_cg(op, rhs, cfg.solver_iters, cfg.solver_eps).remove(0) {
            Ok(u) => return Ok(u),
            Err(iteration) => log::debug!(
                "conjugate gradient failed at iteration {iteration}; retrying with GMRES"
            ),
        }
    }
    match gmres_solve(op, rhs, None, cfg.solver_iters, cfg.solver_eps) {
        Ok(sol) => Ok(sol.solution),
        Err(Error::NonFinite { iteration, .. }) => Err(diverged("gmres", cfg.mode, iteration)),
        Err(e) => Err(e),
    }
}

fn check_inputs<T: Scalar>(
    dim: usize,
    cfg: &PosteriorScoreConfig<T>,
    xs: &[T],
    sigma: T,
    obs: &[&Observation<T>],
) -> Result<()> {
    cfg.validate()?;
    check_dim("posterior score batch", obs.len() * dim, xs.len())?;
    for o in obs {
        check_dim("observation latent dimension", dim, o.latent_dim())?;
    }
    if !(sigma > T::zero()) || !sigma.is_finite() {
        return Err(Error::Domain(format!(
            "noise level must be positive, got {sigma}"
        )));
    }
    Ok(())
}

/// `(x_hat - x_t) / sigma^2` for each row.
fn prior_term<T: Scalar>(lin: &dyn Linearization<T>, xs: &[T], sigma: T) -> Vec<T> {
    let inv = T::one() / (sigma * sigma);
    lin.means()
        .iter()
        .zip(xs)
        .map(|(&m, &x)| (m - x) * inv)
        .collect()
}

/// Posterior scores for a batch of chains, chain `b` at row `b` of `xs` with
/// observation `obs[b]`, all at noise level `sigma`.
pub fn posterior_score_batch<T: Scalar>(
    src: &dyn ScoreSource<T>,
    cfg: &PosteriorScoreConfig<T>,
    xs: &[T],
    sigma: T,
    obs: &[&Observation<T>],
) -> Result<Vec<T>> {
    let n = src.dim();
    check_inputs(n, cfg, xs, sigma, obs)?;
    let lin = src.linearize(xs, sigma)?;
    let op =
        LikelihoodCovOperator::new(lin.as_ref(), obs, sigma, cfg.mode, cfg.prior_cov.as_deref())?;
    let means = lin.means();
    let rhs: Vec<T> = obs
        .iter()
        .enumerate()
        .flat_map(|(b, o)| {
            let ax = o.a().matvec(&means[b * n..(b + 1) * n]);
            o.y()
                .iter()
                .zip(ax)
                .map(|(&y, a)| y - a)
                .collect::<Vec<_>>()
        })
        .collect();

    if obs.len() == 1 {
        let u = solve_single(&op, &rhs, cfg)?;
        return Ok(combine(lin.as_ref(), xs, sigma, obs, &[u]));
    }
    if cfg.solver == Solver::Gmres {
        let mut out = Vec::with_capacity(xs.len());
        for (b, o) in obs.iter().enumerate() {
            out.extend(posterior_score_batch(
                src,
                cfg,
                &xs[b * n..(b + 1) * n],
                sigma,
                &[*o],
            )?);
        }
        return Ok(out);
    }

    let mut failed = Vec::new();
    let solutions: Vec<Vec<T>> = lockstep_cg(&op, &rhs, cfg.solver_iters, cfg.solver_eps)
        .into_iter()
        .enumerate()
        .map(|(b, res)| {
            res.unwrap_or_else(|iteration| {
                log::debug!("chain {b}: conjugate gradient failed at iteration {iteration}");
                failed.push(b);
                vec![T::zero(); obs[b].obs_dim()]
            })
        })
        .collect();
    let mut out = combine(lin.as_ref(), xs, sigma, obs, &solutions);
    for b in failed {
        let rows = b * n..(b + 1) * n;
        let single = posterior_score_batch(src, cfg, &xs[rows.clone()], sigma, &[obs[b]])?;
        out[rows].copy_from_slice(&single);
    }
    Ok(out)
}

/// `(x_hat - x_t) / sigma^2 + J^T A^T u` row by row.
fn combine<T: Scalar>(
    lin: &dyn Linearization<T>,
    xs: &[T],
    sigma: T,
    obs: &[&Observation<T>],
    solutions: &[Vec<T>],
) -> Vec<T> {
    let atu: Vec<T> = obs
        .iter()
        .zip(solutions)
        .flat_map(|(o, u)| o.a().matvec_t(u))
        .collect();
    prior_term(lin, xs, sigma)
        .into_iter()
        .zip(lin.vjp(&atu))
        .map(|(p, l)| p + l)
        .collect()
}

/// `grad log p(x_t | y)` for one chain at noise level `sigma`.
pub fn posterior_score<T: Scalar>(
    src: &dyn ScoreSource<T>,
    cfg: &PosteriorScoreConfig<T>,
    x_t: &[T],
    sigma: T,
    obs: &Observation<T>,
) -> Result<Vec<T>> {
    posterior_score_batch(src, cfg, x_t, sigma, &[obs])
}

/// Unconditional scores `(x_hat - x_t) / sigma^2` for a batch.
pub fn prior_score_batch<T: Scalar>(
    src: &dyn ScoreSource<T>,
    xs: &[T],
    sigma: T,
) -> Result<Vec<T>> {
    let lin = src.linearize(xs, sigma)?;
    Ok(prior_term(lin.as_ref(), xs, sigma))
}

/// Mean over `probes` random pairs of `|u^T M v - v^T M u| / (|u| |v|)` for
/// the Tweedie-mode operator of one chain.
pub fn symmetry_defect<T: Scalar, R: Rng + ?Sized>(
    src: &dyn ScoreSource<T>,
    x_t: &[T],
    sigma: T,
    obs: &Observation<T>,
    probes: usize,
    rng: &mut R,
) -> Result<T> {
    check_dim("symmetry probe point", src.dim(), x_t.len())?;
    let lin = src.linearize(x_t, sigma)?;
    let op =
        LikelihoodCovOperator::new(lin.as_ref(), &[obs], sigma, CovarianceMode::Tweedie, None)?;
    let m = obs.obs_dim();
    let mut total = T::zero();
    for _ in 0..probes {
        let u: Vec<T> = standard_normal_vec(rng, m);
        let v: Vec<T> = standard_normal_vec(rng, m);
        let defect = (dot(&u, &op.apply(&v)) - dot(&v, &op.apply(&u))).abs();
        total += defect / (norm(&u) * norm(&v));
    }
    Ok(total / T::lit(probes.max(1) as f64))
}
