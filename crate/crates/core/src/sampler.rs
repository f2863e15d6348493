//! Reverse-diffusion samplers driven by a (posterior) score.
//!
//! The DDIM-style update from time `t` to `s < t` is
//!
//! ```text
//! x_hat = x_t + sigma_t^2 score(x_t)
//! x_s   = x_hat + sigma_s sqrt(1 - eta (1 - sigma_s^2 / sigma_t^2)) (x_t - x_hat) / sigma_t
//!               + sigma_s sqrt(eta (1 - sigma_s^2 / sigma_t^2)) z
//! ```
//!
//! on the grid `t_i = i / T`. All functions work on a batch of chains stored
//! row-major; chain `b` draws its noise from `rngs[b]` only, so a chain's
//! trajectory does not depend on which other chains share its batch.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::scalar::Scalar;
use crate::schedule::NoiseSchedule;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub steps: usize,
    pub eta: f64,
    /// Langevin corrections after each predictor step (predictor-corrector
    /// sampling only).
    pub corrector_steps: usize,
    /// Langevin step size as a multiple of `sigma^2`.
    pub corrector_step_scale: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            steps: 64,
            eta: 1.0,
            corrector_steps: 0,
            corrector_step_scale: 0.01,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("sampler steps must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(Error::Config(format!(
                "eta must lie in [0, 1], got {}",
                self.eta
            )));
        }
        if !(self.corrector_step_scale > 0.0) || !self.corrector_step_scale.is_finite() {
            return Err(Error::Config(
                "corrector_step_scale must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Batched score `(xs, sigma) -> scores`, both `batch x N` row-major.
pub trait BatchScore<T>: Fn(&[T], T) -> Result<Vec<T>> {}

impl<T, F: Fn(&[T], T) -> Result<Vec<T>>> BatchScore<T> for F {}

fn draw_noise<T: Scalar, R: Rng>(rngs: &mut [R], n: usize) -> Vec<T> {
    let mut z = Vec::with_capacity(rngs.len() * n);
    for rng in rngs.iter_mut() {
        z.extend((0..n).map(|_| T::lit(rng.sample::<f64, _>(StandardNormal))));
    }
    z
}

/// The update coefficients `(sigma_s sqrt(1 - eta c) / sigma_t, sigma_s sqrt(eta c))`
/// with `c = 1 - sigma_s^2 / sigma_t^2`.
fn ddim_coefficients<T: Scalar>(sigma_t: T, sigma_s: T, eta: T) -> Result<(T, T)> {
    let c = T::one() - (sigma_s * sigma_s) / (sigma_t * sigma_t);
    let keep = T::one() - eta * c;
    let fresh = eta * c;
    // Rounding can push an exact zero slightly negative.
    let tol = T::lit(1e-12);
    if keep < -tol || fresh < -tol {
        return Err(Error::Domain(format!(
            "negative radicand in sampler update (eta {eta}, sigma_s {sigma_s}, sigma_t {sigma_t})"
        )));
    }
    Ok((
        sigma_s * keep.max(T::zero()).sqrt() / sigma_t,
        sigma_s * fresh.max(T::zero()).sqrt(),
    ))
}

/// One update for a batch given its denoised means and noise.
pub fn ddim_update<T: Scalar>(
    xs: &[T],
    x_hat: &[T],
    z: &[T],
    sigma_t: T,
    sigma_s: T,
    eta: T,
) -> Result<Vec<T>> {
    check_dim("sampler denoised batch", xs.len(), x_hat.len())?;
    check_dim("sampler noise batch", xs.len(), z.len())?;
    let (keep, fresh) = ddim_coefficients(sigma_t, sigma_s, eta)?;
    Ok(xs
        .iter()
        .zip(x_hat)
        .zip(z)
        .map(|((&x, &m), &zi)| m + keep * (x - m) + fresh * zi)
        .collect())
}

fn check_batch<T, R>(xs: &[T], n: usize, rngs: &[R]) -> Result<()> {
    if n == 0 {
        return Err(Error::Domain("latent dimension must be positive".into()));
    }
    check_dim("sampler batch", rngs.len() * n, xs.len())
}

/// Step `i` (from `t = i / T` to `s = (i - 1) / T`) for a batch of chains.
/// Always consumes one `N`-vector of noise per chain, also when `eta = 0`.
pub fn ddim_step<T: Scalar, F: BatchScore<T>, R: Rng>(
    score: &F,
    xs: &[T],
    n: usize,
    i: usize,
    schedule: &NoiseSchedule<T>,
    cfg: &SamplerConfig,
    rngs: &mut [R],
) -> Result<Vec<T>> {
    check_batch(xs, n, rngs)?;
    if i == 0 || i > cfg.steps {
        return Err(Error::Domain(format!(
            "step index {i} outside 1..={}",
            cfg.steps
        )));
    }
    let steps = T::lit(cfg.steps as f64);
    let sigma_t = schedule.sigma_unchecked(T::lit(i as f64) / steps);
    let sigma_s = schedule.sigma_unchecked(T::lit((i - 1) as f64) / steps);
    step_between(score, xs, n, sigma_t, sigma_s, T::lit(cfg.eta), rngs)
}

fn step_between<T: Scalar, F: BatchScore<T>, R: Rng>(
    score: &F,
    xs: &[T],
    n: usize,
    sigma_t: T,
    sigma_s: T,
    eta: T,
    rngs: &mut [R],
) -> Result<Vec<T>> {
    let s = score(xs, sigma_t)?;
    check_dim("score batch", xs.len(), s.len())?;
    let var = sigma_t * sigma_t;
    let x_hat: Vec<T> = xs.iter().zip(&s).map(|(&x, &si)| x + var * si).collect();
    let z = draw_noise(rngs, n);
    ddim_update(xs, &x_hat, &z, sigma_t, sigma_s, eta)
}

fn initial_state<T: Scalar, R: Rng>(
    schedule: &NoiseSchedule<T>,
    n: usize,
    rngs: &mut [R],
) -> Vec<T> {
    let sigma_1 = schedule.sigma_max();
    draw_noise::<T, R>(rngs, n)
        .into_iter()
        .map(|z| sigma_1 * z)
        .collect()
}

/// Runs `rngs.len()` chains from `x_1 ~ N(0, sigma_max^2 I)` down the grid
/// and returns the final states, `batch x n` row-major.
pub fn sample_batch<T: Scalar, F: BatchScore<T>, R: Rng>(
    score: &F,
    n: usize,
    schedule: &NoiseSchedule<T>,
    cfg: &SamplerConfig,
    rngs: &mut [R],
) -> Result<Vec<T>> {
    cfg.validate()?;
    let mut xs = initial_state(schedule, n, rngs);
    check_batch(&xs, n, rngs)?;
    for i in (1..=cfg.steps).rev() {
        xs = ddim_step(score, &xs, n, i, schedule, cfg, rngs)?;
    }
    Ok(xs)
}

/// Single-chain [`sample_batch`].
pub fn sample_posterior<T: Scalar, F: BatchScore<T>, R: Rng>(
    score: &F,
    n: usize,
    schedule: &NoiseSchedule<T>,
    cfg: &SamplerConfig,
    rng: &mut R,
) -> Result<Vec<T>> {
    sample_batch(score, n, schedule, cfg, std::slice::from_mut(rng))
}

/// `steps` unadjusted Langevin updates `x += delta s(x) + sqrt(2 delta) z` at
/// a fixed noise level.
pub fn langevin<T: Scalar, F: BatchScore<T>, R: Rng>(
    score: &F,
    xs: &[T],
    n: usize,
    sigma: T,
    delta: T,
    steps: usize,
    rngs: &mut [R],
) -> Result<Vec<T>> {
    check_batch(xs, n, rngs)?;
    let mut xs = xs.to_vec();
    let noise_scale = (T::lit(2.0) * delta).sqrt();
    for _ in 0..steps {
        let s = score(&xs, sigma)?;
        check_dim("score batch", xs.len(), s.len())?;
        let z = draw_noise::<T, R>(rngs, n);
        for ((x, &si), &zi) in xs.iter_mut().zip(&s).zip(&z) {
            *x += delta * si + noise_scale * zi;
        }
    }
    Ok(xs)
}

/// Predictor-corrector sampling: at every grid step a deterministic
/// (`eta = 0`) update to the next level, then `cfg.corrector_steps` Langevin
/// corrections at that level with step `corrector_step_scale * sigma^2`.
pub fn pc_sample_batch<T: Scalar, F: BatchScore<T>, R: Rng>(
    score: &F,
    n: usize,
    schedule: &NoiseSchedule<T>,
    cfg: &SamplerConfig,
    rngs: &mut [R],
) -> Result<Vec<T>> {
    cfg.validate()?;
    let predictor = SamplerConfig {
        eta: 0.0,
        ..cfg.clone()
    };
    let mut xs = initial_state(schedule, n, rngs);
    check_batch(&xs, n, rngs)?;
    let steps = T::lit(cfg.steps as f64);
    for i in (1..=cfg.steps).rev() {
        xs = ddim_step(score, &xs, n, i, schedule, &predictor, rngs)?;
        if cfg.corrector_steps > 0 {
            let sigma_s = schedule.sigma_unchecked(T::lit((i - 1) as f64) / steps);
            let delta = T::lit(cfg.corrector_step_scale) * sigma_s * sigma_s;
            xs = langevin(score, &xs, n, sigma_s, delta, cfg.corrector_steps, rngs)?;
        }
    }
    Ok(xs)
}

/// Single-chain [`pc_sample_batch`].
pub fn pc_sample<T: Scalar, F: BatchScore<T>, R: Rng>(
    score: &F,
    n: usize,
    schedule: &NoiseSchedule<T>,
    cfg: &SamplerConfig,
    rng: &mut R,
) -> Result<Vec<T>> {
    pc_sample_batch(score, n, schedule, cfg, std::slice::from_mut(rng))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{standard_normal_vec, DenseMat};
    use crate::manifold::Observation;
    use crate::posterior::{posterior_score_batch, GaussianSource, PosteriorScoreConfig};
    use crate::rng::{seeded, SimRng};

    fn rngs(seed: u64, count: usize) -> Vec<SimRng> {
        (0..count as u64)
            .map(|i| seeded(seed * 1_000_003 + i))
            .collect()
    }

    fn moments(xs: &[f64], n: usize) -> (Vec<f64>, DenseMat<f64>) {
        let count = (xs.len() / n) as f64;
        let mut mean = vec![0.0; n];
        for row in xs.chunks(n) {
            for i in 0..n {
                mean[i] += row[i] / count;
            }
        }
        let mut cov = DenseMat::zeros(n, n);
        for row in xs.chunks(n) {
            let d: Vec<f64> = row.iter().zip(&mean).map(|(a, b)| a - b).collect();
            cov.add_outer(1.0 / (count - 1.0), &d, &d);
        }
        (mean, cov)
    }

    /// Exact score of `N(mean, cov)` diffused to `sigma`.
    fn gaussian_score(
        mean: Vec<f64>,
        cov: DenseMat<f64>,
    ) -> impl Fn(&[f64], f64) -> Result<Vec<f64>> {
        move |xs: &[f64], sigma: f64| {
            let n = mean.len();
            let mut c = cov.clone();
            c.add_diag(sigma * sigma);
            let l = crate::linalg::cholesky(&c)?;
            Ok(xs
                .chunks(n)
                .flat_map(|x| {
                    let d: Vec<f64> = mean.iter().zip(x).map(|(m, xi)| m - xi).collect();
                    crate::linalg::cholesky_solve(&l, &d)
                })
                .collect())
        }
    }

    #[test]
    fn config_validation() {
        assert!(SamplerConfig::default().validate().is_ok());
        for bad in [
            SamplerConfig {
                steps: 0,
                ..Default::default()
            },
            SamplerConfig {
                eta: 1.5,
                ..Default::default()
            },
            SamplerConfig {
                corrector_step_scale: 0.0,
                ..Default::default()
            },
        ] {
            assert!(bad.validate().is_err());
        }
    }

    #[test]
    fn equal_noise_levels_leave_the_state_unchanged() {
        let x = [0.3f64, -1.2, 4.0];
        let x_hat = [1.0f64, 0.0, -2.0];
        let z = [5.0f64, 5.0, 5.0];
        for eta in [0.0, 0.5, 1.0] {
            let out = ddim_update(&x, &x_hat, &z, 0.7, 0.7, eta).unwrap();
            for i in 0..3 {
                assert!((out[i] - x[i]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn vanishing_target_noise_returns_the_mean() {
        let out = ddim_update(&[0.3f64, 2.0], &[1.0, -1.0], &[0.4, 0.4], 1.0, 1e-12, 1.0).unwrap();
        assert!((out[0] - 1.0).abs() < 1e-11 && (out[1] + 1.0).abs() < 1e-11);
    }

    #[test]
    fn eta_out_of_range_is_rejected() {
        assert!(ddim_update(&[0.0], &[0.0], &[0.0], 1.0, 0.5, 1.5).is_err());
    }

    #[test]
    fn eta_zero_ignores_the_noise() {
        let score = gaussian_score(vec![0.0; 2], DenseMat::identity(2));
        let cfg = SamplerConfig {
            eta: 0.0,
            steps: 16,
            ..Default::default()
        };
        let x1 = [3.0, -4.0];
        let a = ddim_step(
            &score,
            &x1,
            2,
            16,
            &NoiseSchedule::default(),
            &cfg,
            &mut rngs(1, 1),
        )
        .unwrap();
        let b = ddim_step(
            &score,
            &x1,
            2,
            16,
            &NoiseSchedule::default(),
            &cfg,
            &mut rngs(2, 1),
        )
        .unwrap();
        assert_eq!(a, b);
        assert!(ddim_step(
            &score,
            &x1,
            2,
            17,
            &NoiseSchedule::default(),
            &cfg,
            &mut rngs(2, 1)
        )
        .is_err());
        assert!(ddim_step(
            &score,
            &x1,
            2,
            0,
            &NoiseSchedule::default(),
            &cfg,
            &mut rngs(2, 1)
        )
        .is_err());
    }

    #[test]
    fn grid_steps_telescope() {
        let sched = NoiseSchedule::<f64>::default();
        let steps = 10;
        let grid = sched.grid(steps);
        for i in (1..=steps).rev() {
            let t = i as f64 / steps as f64;
            let s = (i - 1) as f64 / steps as f64;
            assert_eq!(grid[i], t);
            assert_eq!(grid[i - 1], s);
        }
        assert_eq!(grid[0], 0.0);
        assert_eq!(grid[steps], 1.0);
    }

    #[test]
    fn injected_noise_variance_matches_the_update() {
        // With a frozen x_hat the spread of x_s is pure injected noise.
        let frozen = |xs: &[f64], sigma: f64| -> Result<Vec<f64>> {
            Ok(xs.iter().map(|&x| (0.5 - x) / (sigma * sigma)).collect())
        };
        let sched = NoiseSchedule::default();
        let cfg = SamplerConfig {
            steps: 8,
            eta: 1.0,
            ..Default::default()
        };
        let chains = 20_000;
        let xs = vec![0.5; chains];
        let out = ddim_step(&frozen, &xs, 1, 4, &sched, &cfg, &mut rngs(3, chains)).unwrap();
        let (st, ss) = (sched.sigma(0.5).unwrap(), sched.sigma(0.375).unwrap());
        let expected = ss * ss * (1.0 - ss * ss / (st * st));
        let (_, var) = moments(&out, 1);
        assert!((var[(0, 0)] / expected - 1.0).abs() < 0.03);
        let eta0 = SamplerConfig { eta: 0.0, ..cfg };
        let out = ddim_step(&frozen, &xs, 1, 4, &sched, &eta0, &mut rngs(3, chains)).unwrap();
        assert!(out.iter().all(|&x| (x - 0.5).abs() < 1e-15));
    }

    #[test]
    fn unconditional_sampling_matches_the_discrete_chain_variance() {
        // For an N(0, 1) prior each update is linear, x_s = a x_t + b z, so the
        // terminal variance follows a scalar recursion.
        fn chain_variance(steps: usize, eta: f64) -> f64 {
            let sched = NoiseSchedule::<f64>::default();
            let sigma = |i: usize| sched.sigma_unchecked(i as f64 / steps as f64);
            let mut v = sigma(steps).powi(2);
            for i in (1..=steps).rev() {
                let (st, ss) = (sigma(i), sigma(i - 1));
                let c = 1.0 - ss * ss / (st * st);
                let keep = ss * (1.0 - eta * c).sqrt() / st;
                let shrink = 1.0 / (1.0 + st * st);
                let a = shrink + keep * (1.0 - shrink);
                v = a * a * v + ss * ss * eta * c;
            }
            v
        }
        assert!((chain_variance(4096, 1.0) - 1.0).abs() < 0.01);
        assert!((chain_variance(4096, 0.0) - 1.0).abs() < 0.01);

        let score = gaussian_score(vec![0.0; 2], DenseMat::identity(2));
        let cfg = SamplerConfig {
            steps: 64,
            eta: 1.0,
            ..Default::default()
        };
        let xs = sample_batch(
            &score,
            2,
            &NoiseSchedule::default(),
            &cfg,
            &mut rngs(4, 8192),
        )
        .unwrap();
        let (mean, cov) = moments(&xs, 2);
        let v = chain_variance(64, 1.0);
        assert!(mean.iter().all(|m| m.abs() < 0.05));
        let err = cov.sub(&DenseMat::identity(2).scaled(v)).frobenius_norm() / v;
        assert!(err < 0.05 * 2f64.sqrt(), "covariance error {err}, {cov:?}");

        // With enough steps the chain approaches the prior itself.
        let cfg = SamplerConfig { steps: 512, ..cfg };
        let xs = sample_batch(
            &score,
            2,
            &NoiseSchedule::default(),
            &cfg,
            &mut rngs(5, 8192),
        )
        .unwrap();
        let (_, cov) = moments(&xs, 2);
        let err = cov.sub(&DenseMat::identity(2)).frobenius_norm() / 2f64.sqrt();
        assert!(err < 0.05, "covariance error {err}, {cov:?}");
    }

    #[test]
    fn gaussian_posterior_sampling_matches_conjugate_oracle() {
        let n = 3;
        let src = GaussianSource::new(vec![0.0; n], &DenseMat::identity(n)).unwrap();
        let o = Observation::new(vec![0.8, -0.3, 1.5], DenseMat::identity(n), 0.1).unwrap();
        let cfg = PosteriorScoreConfig::default();
        let chains = 4096;
        let observations = vec![&o; chains];
        let score = |xs: &[f64], sigma: f64| {
            posterior_score_batch(&src, &cfg, xs, sigma, &observations[..xs.len() / n])
        };
        let scfg = SamplerConfig {
            steps: 256,
            eta: 1.0,
            ..Default::default()
        };
        let xs = sample_batch(
            &score,
            n,
            &NoiseSchedule::default(),
            &scfg,
            &mut rngs(5, chains),
        )
        .unwrap();
        // Conjugate posterior for N(0, I) prior and A = I: scalar shrinkage.
        let k = 1.0 / (1.0 + 0.01);
        let post_var = 0.01 * k;
        let (mean, cov) = moments(&xs, n);
        for i in 0..n {
            let err = (mean[i] - k * o.y()[i]).abs() / post_var.sqrt();
            assert!(err < 0.03 * 3.0, "coordinate {i}: {err}");
        }
        let target = DenseMat::identity(n).scaled(post_var);
        let rel = cov.sub(&target).frobenius_norm() / target.frobenius_norm();
        assert!(rel < 0.1, "covariance error {rel}");
    }

    #[test]
    fn sampling_is_seed_deterministic() {
        let score = gaussian_score(vec![1.0, 2.0], DenseMat::identity(2).scaled(0.3));
        let cfg = SamplerConfig {
            steps: 32,
            ..Default::default()
        };
        let sched = NoiseSchedule::default();
        let a = sample_posterior(&score, 2, &sched, &cfg, &mut seeded(9)).unwrap();
        let b = sample_posterior(&score, 2, &sched, &cfg, &mut seeded(9)).unwrap();
        assert_eq!(a, b);
        let pc = SamplerConfig {
            corrector_steps: 2,
            ..cfg
        };
        assert_eq!(
            pc_sample(&score, 2, &sched, &pc, &mut seeded(9)).unwrap(),
            pc_sample(&score, 2, &sched, &pc, &mut seeded(9)).unwrap()
        );
    }

    #[test]
    fn chains_do_not_depend_on_their_batch() {
        let score = gaussian_score(vec![0.0; 2], DenseMat::identity(2));
        let cfg = SamplerConfig {
            steps: 16,
            ..Default::default()
        };
        let sched = NoiseSchedule::default();
        let all = sample_batch(&score, 2, &sched, &cfg, &mut rngs(6, 4)).unwrap();
        let mut third = rngs(6, 4).swap_remove(2);
        let alone = sample_posterior(&score, 2, &sched, &cfg, &mut third).unwrap();
        assert_eq!(&all[4..6], &alone[..]);
    }

    #[test]
    fn predictor_corrector_without_corrections_is_deterministic_ddim() {
        let score = gaussian_score(vec![0.5, -0.5], DenseMat::identity(2).scaled(0.2));
        let sched = NoiseSchedule::default();
        let cfg = SamplerConfig {
            steps: 32,
            eta: 0.0,
            corrector_steps: 0,
            ..Default::default()
        };
        let a = pc_sample(
            &score,
            2,
            &sched,
            &SamplerConfig {
                eta: 1.0,
                ..cfg.clone()
            },
            &mut seeded(7),
        )
        .unwrap();
        let b = sample_posterior(&score, 2, &sched, &cfg, &mut seeded(7)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn langevin_reaches_the_gaussian_target() {
        // Target N(0, 1 + sigma^2) is the unit Gaussian diffused to sigma.
        let sigma = 1.0;
        let score = gaussian_score(vec![0.0], DenseMat::identity(1));
        let chains = 2000;
        let init: Vec<f64> = standard_normal_vec::<f64, _>(&mut seeded(8), chains)
            .iter()
            .map(|z| 6.0 * z)
            .collect();
        let out = langevin(
            &score,
            &init,
            1,
            sigma,
            0.01 * sigma * sigma,
            4096,
            &mut rngs(8, chains),
        )
        .unwrap();
        let (_, var) = moments(&out, 1);
        assert!(
            (var[(0, 0)] / 2.0 - 1.0).abs() < 0.05,
            "variance {}",
            var[(0, 0)]
        );
    }
}
