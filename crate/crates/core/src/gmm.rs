//! Mixtures of isotropic Gaussians with closed-form diffusion quantities.
//!
//! For a prior `sum_j w_j N(mu_j, b^2 I)` the noised marginal at level
//! `sigma` is `sum_j w_j N(mu_j, (b^2 + sigma^2) I)`, so densities, scores,
//! denoising posteriors and observation-conditioned posteriors are all
//! available exactly.

use rand::Rng;
use rand_distr::weighted::WeightedIndex;
use rand_distr::Distribution;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::linalg::{
    cholesky, cholesky_log_det, cholesky_solve, solve_lower, solve_lower_t, standard_normal_vec,
    DenseMat,
};
use crate::manifold::Observation;
use crate::scalar::Scalar;

/// `log(sum exp(v))` without overflow. Returns `-inf` for an empty or all
/// `-inf` input.
pub fn log_sum_exp<T: Scalar>(v: &[T]) -> T {
    let m = v.iter().copied().fold(T::neg_infinity(), T::max);
    if m == T::neg_infinity() {
        return m;
    }
    m + v.iter().map(|&x| (x - m).exp()).sum::<T>().ln()
}

/// Normalizes log-weights in place into probabilities and returns their
/// log-normalizer.
fn softmax_in_place<T: Scalar>(logits: &mut [T]) -> T {
    let lse = log_sum_exp(logits);
    for l in logits.iter_mut() {
        *l = (*l - lse).exp();
    }
    lse
}

fn check_simplex<T: Scalar>(weights: &[T]) -> Result<()> {
    if weights.iter().any(|&w| !(w >= T::zero()) || !w.is_finite()) {
        return Err(Error::Domain(
            "mixture weights must be finite and non-negative".into(),
        ));
    }
    let total: T = weights.iter().copied().sum();
    if (total - T::one()).abs() > T::lit(1e-12) {
        return Err(Error::Domain(format!(
            "mixture weights sum to {total}, not 1"
        )));
    }
    Ok(())
}

/// Mixture of isotropic Gaussians sharing one bandwidth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GmmPrior<T> {
    centers: Vec<Vec<T>>,
    bandwidth: T,
    weights: Vec<T>,
}

/// Mean and covariance of `p(x | x_t)`.
#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorMoments<T> {
    pub mean: Vec<T>,
    pub cov: DenseMat<T>,
}

impl<T: Scalar> GmmPrior<T> {
    pub fn new(centers: Vec<Vec<T>>, bandwidth: T, weights: Vec<T>) -> Result<Self> {
        let dim = centers.first().map(Vec::len).ok_or(Error::EmptyDataset)?;
        if dim == 0 {
            return Err(Error::Domain(
                "mixture centers must have positive dimension".into(),
            ));
        }
        for c in &centers {
            check_dim("mixture center", dim, c.len())?;
        }
        check_dim("mixture weights", centers.len(), weights.len())?;
        if !(bandwidth > T::zero()) || !bandwidth.is_finite() {
            return Err(Error::Domain(format!(
                "bandwidth must be positive, got {bandwidth}"
            )));
        }
        check_simplex(&weights)?;
        Ok(Self {
            centers,
            bandwidth,
            weights,
        })
    }

    /// Equal weights on every center.
    pub fn uniform(centers: Vec<Vec<T>>, bandwidth: T) -> Result<Self> {
        let k = centers.len().max(1);
        let w = T::one() / T::lit(k as f64);
        let n = centers.len();
        Self::new(centers, bandwidth, vec![w; n])
    }

    pub fn dim(&self) -> usize {
        self.centers[0].len()
    }

    pub fn n_components(&self) -> usize {
        self.centers.len()
    }

    pub fn centers(&self) -> &[Vec<T>] {
        &self.centers
    }

    pub fn bandwidth(&self) -> T {
        self.bandwidth
    }

    pub fn weights(&self) -> &[T] {
        &self.weights
    }

    /// Per-component `log w_j + log N(x_t; mu_j, s^2 I)` with
    /// `s^2 = bandwidth^2 + sigma^2`.
    fn component_log_terms(&self, x_t: &[T], sigma: T) -> Vec<T> {
        let n = T::lit(self.dim() as f64);
        let s2 = self.bandwidth * self.bandwidth + sigma * sigma;
        let norm_const = -T::lit(0.5) * n * (T::TAU() * s2).ln();
        self.centers
            .iter()
            .zip(&self.weights)
            .map(|(mu, &w)| {
                let d2: T = mu.iter().zip(x_t).map(|(&m, &x)| (x - m) * (x - m)).sum();
                w.ln() + norm_const - d2 / (T::lit(2.0) * s2)
            })
            .collect()
    }

    fn responsibilities(&self, x_t: &[T], sigma: T) -> Vec<T> {
        let mut r = self.component_log_terms(x_t, sigma);
        softmax_in_place(&mut r);
        r
    }

    /// `log p(x_t)` for the prior diffused to noise level `sigma`.
    pub fn log_p_xt(&self, x_t: &[T], sigma: T) -> Result<T> {
        check_dim("mixture density point", self.dim(), x_t.len())?;
        check_sigma(sigma, false)?;
        Ok(log_sum_exp(&self.component_log_terms(x_t, sigma)))
    }

    /// `grad log p(x_t)` at noise level `sigma`.
    pub fn score_xt(&self, x_t: &[T], sigma: T) -> Result<Vec<T>> {
        check_dim("mixture score point", self.dim(), x_t.len())?;
        check_sigma(sigma, false)?;
        let s2 = self.bandwidth * self.bandwidth + sigma * sigma;
        let r = self.responsibilities(x_t, sigma);
        let mut out = vec![T::zero(); self.dim()];
        for (mu, &rj) in self.centers.iter().zip(&r) {
            for ((o, &m), &x) in out.iter_mut().zip(mu).zip(x_t) {
                *o += rj * (m - x) / s2;
            }
        }
        Ok(out)
    }

    /// Exact `E[x | x_t]` and `V[x | x_t]` for `x_t = x + sigma z`.
    pub fn posterior_moments(&self, x_t: &[T], sigma: T) -> Result<PosteriorMoments<T>> {
        check_dim("mixture posterior point", self.dim(), x_t.len())?;
        check_sigma(sigma, true)?;
        let n = self.dim();
        let b2 = self.bandwidth * self.bandwidth;
        let s2 = sigma * sigma;
        let denom = b2 + s2;
        let r = self.responsibilities(x_t, sigma);
        let means: Vec<Vec<T>> = self
            .centers
            .iter()
            .map(|mu| {
                mu.iter()
                    .zip(x_t)
                    .map(|(&m, &x)| (s2 * m + b2 * x) / denom)
                    .collect()
            })
            .collect();
        let mut mean = vec![T::zero(); n];
        for (m, &rj) in means.iter().zip(&r) {
            for (o, &mi) in mean.iter_mut().zip(m) {
                *o += rj * mi;
            }
        }
        let mut cov = DenseMat::identity(n).scaled(b2 * s2 / denom);
        for (m, &rj) in means.iter().zip(&r) {
            if rj > T::zero() {
                let d: Vec<T> = m.iter().zip(&mean).map(|(&a, &b)| a - b).collect();
                cov.add_outer(rj, &d, &d);
            }
        }
        Ok(PosteriorMoments {
            mean,
            cov: cov.symmetrized(),
        })
    }

    /// Mean of the (undiffused) prior.
    pub fn mean(&self) -> Vec<T> {
        let mut out = vec![T::zero(); self.dim()];
        for (mu, &w) in self.centers.iter().zip(&self.weights) {
            for (o, &m) in out.iter_mut().zip(mu) {
                *o += w * m;
            }
        }
        out
    }

    /// Covariance of the (undiffused) prior.
    pub fn covariance(&self) -> DenseMat<T> {
        let mean = self.mean();
        let mut cov = DenseMat::identity(self.dim()).scaled(self.bandwidth * self.bandwidth);
        for (mu, &w) in self.centers.iter().zip(&self.weights) {
            let d: Vec<T> = mu.iter().zip(&mean).map(|(&a, &b)| a - b).collect();
            cov.add_outer(w, &d, &d);
        }
        cov
    }

    /// I.i.d. draws from the prior diffused to `sigma` (`0` for the prior
    /// itself).
    pub fn sample_xt<R: Rng + ?Sized>(&self, rng: &mut R, n: usize, sigma: T) -> Vec<Vec<T>> {
        let std = (self.bandwidth * self.bandwidth + sigma * sigma).sqrt();
        let pick = WeightedIndex::new(self.weights.iter().map(|w| w.to_f64_lossy()))
            .expect("weights form a simplex");
        (0..n)
            .map(|_| {
                let j = pick.sample(rng);
                let z: Vec<T> = standard_normal_vec(rng, self.dim());
                self.centers[j]
                    .iter()
                    .zip(&z)
                    .map(|(&m, &zi)| m + std * zi)
                    .collect()
            })
            .collect()
    }

    pub fn sample_prior<R: Rng + ?Sized>(&self, rng: &mut R, n: usize) -> Vec<Vec<T>> {
        self.sample_xt(rng, n, T::zero())
    }

    /// The exact `p(x_t | y)` for `x_t = x + sigma z`: every component is
    /// conditioned on the observation, reweighted by its evidence and then
    /// widened by `sigma^2 I`.
    pub fn exact_diffused_posterior(
        &self,
        obs: &Observation<T>,
        sigma: T,
    ) -> Result<GmmWithFullCov<T>> {
        check_dim("observation latent dimension", self.dim(), obs.a().cols())?;
        check_sigma(sigma, false)?;
        let n = self.dim();
        let a = obs.a();
        let b2 = self.bandwidth * self.bandwidth;
        // S = sigma_y^2 I + b^2 A A^T is shared by all components.
        let mut s = a.matmul_t(a).scaled(b2);
        s.add_diag(obs.sigma_y() * obs.sigma_y());
        let ls = cholesky(&s)?;
        let log_det_s = cholesky_log_det(&ls);
        let m = T::lit(obs.y().len() as f64);

        // C = b^2 I - b^4 A^T S^{-1} A, identical for all components.
        let mut cov = DenseMat::identity(n).scaled(b2);
        for col in 0..obs.y().len() {
            let mut e = vec![T::zero(); obs.y().len()];
            e[col] = T::one();
            // Row `col` of L^{-1} is L^{-T} e_col, and row `col` of L^{-1} A
            // gives one rank-one term of A^T S^{-1} A = (L^{-1} A)^T (L^{-1} A).
            let w = solve_lower_t(&ls, &e);
            let mut g = vec![T::zero(); n];
            for (k, &wk) in w.iter().enumerate() {
                for (gi, &aki) in g.iter_mut().zip(a.row(k)) {
                    *gi += wk * aki;
                }
            }
            cov.add_outer(-b2 * b2, &g, &g);
        }
        let mut cov = cov.symmetrized();
        cov.add_diag(sigma * sigma);

        let mut log_w = Vec::with_capacity(self.n_components());
        let mut means = Vec::with_capacity(self.n_components());
        for (mu, &w) in self.centers.iter().zip(&self.weights) {
            let resid: Vec<T> = obs
                .y()
                .iter()
                .zip(a.matvec(mu))
                .map(|(&y, am)| y - am)
                .collect();
            let sol = cholesky_solve(&ls, &resid);
            let quad: T = resid.iter().zip(&sol).map(|(&r, &s)| r * s).sum();
            log_w.push(w.ln() - T::lit(0.5) * (m * T::TAU().ln() + log_det_s + quad));
            let gain = a.matvec_t(&sol);
            means.push(
                mu.iter()
                    .zip(&gain)
                    .map(|(&mi, &gi)| mi + b2 * gi)
                    .collect(),
            );
        }
        softmax_in_place(&mut log_w);
        let components = means
            .into_iter()
            .zip(log_w)
            .map(|(mean, weight)| (weight, mean))
            .collect();
        GmmWithFullCov::shared_covariance(components, cov)
    }
}

fn check_sigma<T: Scalar>(sigma: T, strictly_positive: bool) -> Result<()> {
    let ok = if strictly_positive {
        sigma > T::zero()
    } else {
        sigma >= T::zero()
    };
    if ok && sigma.is_finite() {
        Ok(())
    } else {
        Err(Error::Domain(format!(
            "noise level must be {}, got {sigma}",
            if strictly_positive {
                "positive"
            } else {
                "non-negative"
            }
        )))
    }
}

/// Gaussian mixture with full covariances, stored with Cholesky factors for
/// density evaluation and exact sampling.
#[derive(Clone, Debug)]
pub struct GmmWithFullCov<T> {
    weights: Vec<T>,
    means: Vec<Vec<T>>,
    covs: Vec<DenseMat<T>>,
    factors: Vec<DenseMat<T>>,
}

impl<T: Scalar> GmmWithFullCov<T> {
    pub fn new(weights: Vec<T>, means: Vec<Vec<T>>, covs: Vec<DenseMat<T>>) -> Result<Self> {
        let dim = means.first().map(Vec::len).ok_or(Error::EmptyDataset)?;
        check_dim("mixture weights", means.len(), weights.len())?;
        check_dim("mixture covariances", means.len(), covs.len())?;
        for (m, c) in means.iter().zip(&covs) {
            check_dim("mixture mean", dim, m.len())?;
            check_dim("mixture covariance", dim, c.rows())?;
        }
        check_simplex(&weights)?;
        let factors = covs.iter().map(cholesky).collect::<Result<Vec<_>>>()?;
        Ok(Self {
            weights,
            means,
            covs,
            factors,
        })
    }

    fn shared_covariance(components: Vec<(T, Vec<T>)>, cov: DenseMat<T>) -> Result<Self> {
        let factor = cholesky(&cov)?;
        let k = components.len();
        let (weights, means) = components.into_iter().unzip();
        Ok(Self {
            weights,
            means,
            covs: vec![cov; k],
            factors: vec![factor; k],
        })
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    pub fn weights(&self) -> &[T] {
        &self.weights
    }

    pub fn means(&self) -> &[Vec<T>] {
        &self.means
    }

    pub fn covariances(&self) -> &[DenseMat<T>] {
        &self.covs
    }

    /// Per-component log-terms and the whitened residuals `L_j^{-1}(x - m_j)`.
    fn component_terms(&self, x: &[T]) -> (Vec<T>, Vec<Vec<T>>) {
        let n = T::lit(self.dim() as f64);
        let mut logs = Vec::with_capacity(self.weights.len());
        let mut whitened = Vec::with_capacity(self.weights.len());
        for ((w, m), l) in self.weights.iter().zip(&self.means).zip(&self.factors) {
            let d: Vec<T> = x.iter().zip(m).map(|(&a, &b)| a - b).collect();
            let z = solve_lower(l, &d);
            let quad: T = z.iter().map(|&v| v * v).sum();
            logs.push(w.ln() - T::lit(0.5) * (n * T::TAU().ln() + cholesky_log_det(l) + quad));
            whitened.push(z);
        }
        (logs, whitened)
    }

    pub fn log_density(&self, x: &[T]) -> Result<T> {
        check_dim("mixture density point", self.dim(), x.len())?;
        Ok(log_sum_exp(&self.component_terms(x).0))
    }

    pub fn score(&self, x: &[T]) -> Result<Vec<T>> {
        check_dim("mixture score point", self.dim(), x.len())?;
        let (mut r, whitened) = self.component_terms(x);
        softmax_in_place(&mut r);
        let mut out = vec![T::zero(); self.dim()];
        for ((rj, z), l) in r.iter().zip(&whitened).zip(&self.factors) {
            let g = solve_lower_t(l, z);
            for (o, gi) in out.iter_mut().zip(g) {
                *o -= *rj * gi;
            }
        }
        Ok(out)
    }

    pub fn mean(&self) -> Vec<T> {
        let mut out = vec![T::zero(); self.dim()];
        for (m, &w) in self.means.iter().zip(&self.weights) {
            for (o, &mi) in out.iter_mut().zip(m) {
                *o += w * mi;
            }
        }
        out
    }

    pub fn covariance(&self) -> DenseMat<T> {
        let mean = self.mean();
        let mut cov = DenseMat::zeros(self.dim(), self.dim());
        for ((m, c), &w) in self.means.iter().zip(&self.covs).zip(&self.weights) {
            cov = cov.add(&c.scaled(w));
            let d: Vec<T> = m.iter().zip(&mean).map(|(&a, &b)| a - b).collect();
            cov.add_outer(w, &d, &d);
        }
        cov
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, n: usize) -> Vec<Vec<T>> {
        let pick = WeightedIndex::new(self.weights.iter().map(|w| w.to_f64_lossy()))
            .expect("weights form a simplex");
        (0..n)
            .map(|_| {
                let j = pick.sample(rng);
                let z: Vec<T> = standard_normal_vec(rng, self.dim());
                let lz = self.factors[j].matvec(&z);
                self.means[j]
                    .iter()
                    .zip(&lz)
                    .map(|(&m, &v)| m + v)
                    .collect()
            })
            .collect()
    }
}
