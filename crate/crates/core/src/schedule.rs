//! Variance-exploding noise schedule.
//!
//! `sigma(t)` interpolates geometrically between `sigma_min` and `sigma_max`;
//! the perturbation kernel is `x_t = x + sigma(t) z` (no drift, unit scale).

use rand::Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::scalar::Scalar;

pub const DEFAULT_SIGMA_MIN: f64 = 1e-3;
pub const DEFAULT_SIGMA_MAX: f64 = 1e2;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule<T> {
    sigma_min: T,
    sigma_max: T,
}

impl<T: Scalar> Default for NoiseSchedule<T> {
    fn default() -> Self {
        Self {
            sigma_min: T::lit(DEFAULT_SIGMA_MIN),
            sigma_max: T::lit(DEFAULT_SIGMA_MAX),
        }
    }
}

fn check_time<T: Scalar>(t: T) -> Result<()> {
    if t >= T::zero() && t <= T::one() {
        Ok(())
    } else {
        Err(Error::Domain(format!("diffusion time {t} outside [0, 1]")))
    }
}

impl<T: Scalar> NoiseSchedule<T> {
    pub fn new(sigma_min: T, sigma_max: T) -> Result<Self> {
        if !(sigma_min > T::zero() && sigma_max > sigma_min && sigma_max.is_finite()) {
            return Err(Error::Config(format!(
                "need 0 < sigma_min < sigma_max, got {sigma_min} and {sigma_max}"
            )));
        }
        Ok(Self {
            sigma_min,
            sigma_max,
        })
    }

    pub fn sigma_min(&self) -> T {
        self.sigma_min
    }

    pub fn sigma_max(&self) -> T {
        self.sigma_max
    }

    pub fn sigma(&self, t: T) -> Result<T> {
        check_time(t)?;
        Ok(self.sigma_unchecked(t))
    }

    /// `sigma(t)` without the domain check; `t` must lie in `[0, 1]`.
    pub fn sigma_unchecked(&self, t: T) -> T {
        ((T::one() - t) * self.sigma_min.ln() + t * self.sigma_max.ln()).exp()
    }

    /// Inverse of `sigma`; `sigma` must lie in `[sigma_min, sigma_max]`.
    pub fn time_of_sigma(&self, sigma: T) -> T {
        (sigma.ln() - self.sigma_min.ln()) / (self.sigma_max.ln() - self.sigma_min.ln())
    }

    pub fn perturb(&self, x: &[T], t: T, noise: &[T]) -> Result<Vec<T>> {
        check_dim("perturb noise", x.len(), noise.len())?;
        let s = self.sigma(t)?;
        Ok(x.iter().zip(noise).map(|(&xi, &zi)| xi + s * zi).collect())
    }

    /// Denoising loss weight `1 / sigma_t^2 + 1`.
    pub fn loss_weight(&self, t: T) -> Result<T> {
        let s = self.sigma(t)?;
        Ok(T::one() / (s * s) + T::one())
    }

    /// Training time `t ~ Beta(3, 3)`.
    pub fn sample_train_time<R: Rng + ?Sized>(&self, rng: &mut R) -> T {
        let beta = Beta::new(3.0, 3.0).expect("valid Beta parameters");
        T::lit(beta.sample(rng))
    }

    /// Uniform sampling grid `t_i = i / steps`, `i = 0..=steps`.
    pub fn grid(&self, steps: usize) -> Vec<T> {
        let n = T::lit(steps as f64);
        (0..=steps).map(|i| T::lit(i as f64) / n).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use rand_distr::StandardNormal;

    fn sched() -> NoiseSchedule<f64> {
        NoiseSchedule::default()
    }

    #[test]
    fn sigma_endpoints_and_midpoint() {
        let s = sched();
        assert!((s.sigma(0.0).unwrap() - 1e-3).abs() < 1e-15);
        assert!((s.sigma(1.0).unwrap() - 1e2).abs() < 1e-11);
        assert!((s.sigma(0.5).unwrap() - 0.1f64.sqrt()).abs() < 1e-12);
        assert!((0.1f64.sqrt() - 0.316227766).abs() < 1e-9);
    }

    #[test]
    fn sigma_rejects_out_of_range_time() {
        assert!(matches!(sched().sigma(1.5), Err(Error::Domain(_))));
        assert!(sched().sigma(-1e-9).is_err());
        assert!(sched().loss_weight(2.0).is_err());
    }

    #[test]
    fn schedule_constructor_validates() {
        assert!(NoiseSchedule::new(1.0, 0.5).is_err());
        assert!(NoiseSchedule::new(0.0, 0.5).is_err());
        assert!(NoiseSchedule::new(0.1, 10.0).is_ok());
    }

    #[test]
    fn log_sigma_is_affine() {
        let s = sched();
        let l0 = s.sigma(0.0).unwrap().ln();
        let l1 = s.sigma(1.0).unwrap().ln();
        for t in s.grid(10) {
            let want = l0 + t * (l1 - l0);
            assert!((s.sigma(t).unwrap().ln() - want).abs() < 1e-12);
        }
        assert!((s.time_of_sigma(s.sigma(0.3).unwrap()) - 0.3).abs() < 1e-12);
    }

    #[test]
    fn perturb_examples() {
        let s = sched();
        let out = s.perturb(&[1.0, 1.0], 0.0, &[1.0, -1.0]).unwrap();
        assert!((out[0] - 1.001).abs() < 1e-15 && (out[1] - 0.999).abs() < 1e-15);
        assert_eq!(
            s.perturb(&[3.0, -2.0], 0.7, &[0.0, 0.0]).unwrap(),
            vec![3.0, -2.0]
        );
        let far = s.perturb(&[0.0, 0.0], 1.0, &[1.0, 0.0]).unwrap();
        assert!((far[0] - 100.0).abs() < 1e-11 && far[1] == 0.0);
        assert!(s.perturb(&[0.0], 0.5, &[1.0, 2.0]).is_err());
    }

    #[test]
    fn perturbation_std_matches_sigma() {
        let s = sched();
        let mut rng = seeded(5);
        let t = 0.55;
        let n = 100_000;
        let sq: f64 = (0..n)
            .map(|_| {
                let z: f64 = rng.sample(StandardNormal);
                let d = s.perturb(&[0.25], t, &[z]).unwrap()[0] - 0.25;
                d * d
            })
            .sum();
        let std = (sq / n as f64).sqrt();
        let sigma = s.sigma(t).unwrap();
        assert!((std / sigma - 1.0).abs() < 0.02);
    }

    #[test]
    fn loss_weights() {
        let s = sched();
        assert!((s.loss_weight(1.0).unwrap() - 1.0001).abs() < 1e-12);
        assert!((s.loss_weight(0.0).unwrap() - (1.0 + 1e6)).abs() < 1e-6);
        let unit = s.time_of_sigma(1.0);
        assert!((s.loss_weight(unit).unwrap() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn train_time_is_beta_3_3() {
        let s = sched();
        let mut rng = seeded(11);
        let n = 100_000;
        let draws: Vec<f64> = (0..n).map(|_| s.sample_train_time(&mut rng)).collect();
        assert!(draws.iter().all(|&t| t > 0.0 && t < 1.0));
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / n as f64;
        assert!((mean - 0.5).abs() < 0.005);
        // a b / ((a + b)^2 (a + b + 1)) with a = b = 3
        let want = 9.0 / (36.0 * 7.0);
        assert!((var - want).abs() < 0.002);
    }

    #[test]
    fn grid_is_uniform() {
        let g = sched().grid(4);
        assert_eq!(g, vec![0.0, 0.25, 0.5, 0.75, 1.0]);
    }
}
