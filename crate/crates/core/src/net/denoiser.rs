//! Preconditioned denoiser
//!
//! ```text
//! d(x_t, sigma) = c_skip x_t + c_out h(c_in x_t, embed(log sigma))
//! c_skip = 1 / (sigma^2 + 1), c_out = sigma / sqrt(sigma^2 + 1), c_in = 1 / sqrt(sigma^2 + 1)
//! ```

use rand::Rng;

use super::embed::write_embedding;
use super::mlp::{backward, forward, MlpParams, MlpTape};
use crate::error::{check_dim, Error, Result};
use crate::scalar::Scalar;
use crate::schedule::NoiseSchedule;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Preconditioning<T> {
    pub skip: T,
    pub out: T,
    pub input: T,
}

impl<T: Scalar> Preconditioning<T> {
    pub fn at(sigma: T) -> Self {
        let s2p1 = sigma * sigma + T::one();
        let root = s2p1.sqrt();
        Self {
            skip: T::one() / s2p1,
            out: sigma / root,
            input: T::one() / root,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserModel<T> {
    params: MlpParams<T>,
    schedule: NoiseSchedule<T>,
    data_dim: usize,
    embed_dim: usize,
}

impl<T: Scalar> DenoiserModel<T> {
    pub fn new<R: Rng + ?Sized>(
        data_dim: usize,
        hidden: &[usize],
        embed_dim: usize,
        schedule: NoiseSchedule<T>,
        rng: &mut R,
    ) -> Result<Self> {
        if !embed_dim.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "embedding dimension must be even, got {embed_dim}"
            )));
        }
        let mut widths = vec![data_dim + embed_dim];
        widths.extend_from_slice(hidden);
        widths.push(data_dim);
        Ok(Self {
            params: MlpParams::init(&widths, rng)?,
            schedule,
            data_dim,
            embed_dim,
        })
    }

    pub fn from_parts(
        params: MlpParams<T>,
        schedule: NoiseSchedule<T>,
        embed_dim: usize,
    ) -> Result<Self> {
        let data_dim = params.output_dim();
        check_dim(
            "denoiser input width (data + embedding)",
            data_dim + embed_dim,
            params.input_dim(),
        )?;
        if !embed_dim.is_multiple_of(2) {
            return Err(Error::Config("embedding dimension must be even".into()));
        }
        Ok(Self {
            params,
            schedule,
            data_dim,
            embed_dim,
        })
    }

    pub fn params(&self) -> &MlpParams<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut MlpParams<T> {
        &mut self.params
    }

    pub fn schedule(&self) -> &NoiseSchedule<T> {
        &self.schedule
    }

    pub fn data_dim(&self) -> usize {
        self.data_dim
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    /// Network input rows `[c_in x_t, embed(log sigma)]` for a batch.
    pub(crate) fn network_input(&self, xs: &[T], sigmas: &[T]) -> Vec<T> {
        let (n, e) = (self.data_dim, self.embed_dim);
        let mut input = vec![T::zero(); sigmas.len() * (n + e)];
        for (b, (row, &sigma)) in input.chunks_mut(n + e).zip(sigmas).enumerate() {
            let c = Preconditioning::at(sigma);
            for (dst, &x) in row[..n].iter_mut().zip(&xs[b * n..(b + 1) * n]) {
                *dst = c.input * x;
            }
            write_embedding(sigma.ln(), &mut row[n..]);
        }
        input
    }

    fn check_sigma(sigma: T) -> Result<()> {
        if sigma > T::zero() && sigma.is_finite() {
            Ok(())
        } else {
            Err(Error::Domain(format!(
                "noise level must be positive, got {sigma}"
            )))
        }
    }

    /// Runs the network on a batch and returns `(denoised, tape)`.
    pub(crate) fn forward_batch(&self, xs: &[T], sigmas: &[T]) -> (Vec<T>, MlpTape<T>) {
        let n = self.data_dim;
        let tape = forward(&self.params, sigmas.len(), &self.network_input(xs, sigmas));
        let mut out = tape.output().to_vec();
        for (b, &sigma) in sigmas.iter().enumerate() {
            let c = Preconditioning::at(sigma);
            for (o, &x) in out[b * n..(b + 1) * n]
                .iter_mut()
                .zip(&xs[b * n..(b + 1) * n])
            {
                *o = c.skip * x + c.out * *o;
            }
        }
        (out, tape)
    }

    /// Denoises a row-major batch `xs` (`sigmas.len() x N`), one noise level per row.
    pub fn denoise_batch(&self, xs: &[T], sigmas: &[T]) -> Result<Vec<T>> {
        check_dim("denoise batch", sigmas.len() * self.data_dim, xs.len())?;
        for &s in sigmas {
            Self::check_sigma(s)?;
        }
        Ok(self.forward_batch(xs, sigmas).0)
    }

    pub fn denoise_sigma(&self, x_t: &[T], sigma: T) -> Result<Vec<T>> {
        self.denoise_batch(x_t, &[sigma])
    }

    /// `d(x_t, sigma_t)`
    pub fn denoise(&self, x_t: &[T], t: T) -> Result<Vec<T>> {
        self.denoise_sigma(x_t, self.schedule.sigma(t)?)
    }

    /// `v^T (d d / d x_t)` at `(x_t, t)`.
    pub fn denoise_vjp(&self, x_t: &[T], t: T, v: &[T]) -> Result<Vec<T>> {
        let lin = self.linearize(x_t, self.schedule.sigma(t)?)?;
        lin.vjp(v)
    }

    /// `(d(x_t, t) - x_t) / sigma_t^2`
    pub fn score_from_denoiser(&self, x_t: &[T], t: T) -> Result<Vec<T>> {
        let sigma = self.schedule.sigma(t)?;
        let d = self.denoise_sigma(x_t, sigma)?;
        let inv = T::one() / (sigma * sigma);
        Ok(d.iter()
            .zip(x_t)
            .map(|(&di, &xi)| (di - xi) * inv)
            .collect())
    }

    /// Evaluates the denoiser once and keeps the tape so that repeated
    /// vector-Jacobian products at the same point cost one reverse pass each.
    pub fn linearize(&self, x_t: &[T], sigma: T) -> Result<DenoiserLinearization<'_, T>> {
        check_dim("denoiser input", self.data_dim, x_t.len())?;
        self.linearize_batch(x_t, &[sigma])
    }

    /// Batched [`Self::linearize`]: row `b` of `xs` is evaluated at `sigmas[b]`.
    pub fn linearize_batch(&self, xs: &[T], sigmas: &[T]) -> Result<DenoiserLinearization<'_, T>> {
        check_dim(
            "denoiser batch input",
            sigmas.len() * self.data_dim,
            xs.len(),
        )?;
        for &s in sigmas {
            Self::check_sigma(s)?;
        }
        let (mean, tape) = self.forward_batch(xs, sigmas);
        Ok(DenoiserLinearization {
            model: self,
            tape,
            precond: sigmas.iter().map(|&s| Preconditioning::at(s)).collect(),
            mean,
        })
    }
}

/// Denoiser evaluations at a batch of points, ready for vector-Jacobian
/// products.
pub struct DenoiserLinearization<'a, T> {
    model: &'a DenoiserModel<T>,
    tape: MlpTape<T>,
    precond: Vec<Preconditioning<T>>,
    mean: Vec<T>,
}

impl<T: Scalar> DenoiserLinearization<'_, T> {
    pub fn batch(&self) -> usize {
        self.precond.len()
    }

    /// Denoised rows, `batch x N` row-major.
    pub fn mean(&self) -> &[T] {
        &self.mean
    }

    /// Row-wise `v_b^T J_b` for a `batch x N` cotangent.
    pub fn vjp(&self, v: &[T]) -> Result<Vec<T>> {
        let n = self.model.data_dim;
        check_dim("denoiser cotangent", self.batch() * n, v.len())?;
        let mut d_h = v.to_vec();
        for (row, c) in d_h.chunks_mut(n).zip(&self.precond) {
            row.iter_mut().for_each(|x| *x *= c.out);
        }
        let d_in = backward(&self.model.params, &self.tape, &d_h, None);
        let width = n + self.model.embed_dim;
        let mut out = Vec::with_capacity(v.len());
        for ((vb, gb), c) in v.chunks(n).zip(d_in.chunks(width)).zip(&self.precond) {
            out.extend(
                vb.iter()
                    .zip(&gb[..n])
                    .map(|(&vi, &gi)| c.skip * vi + c.input * gi),
            );
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{norm, sub};
    use crate::rng::seeded;
    use rand_distr::StandardNormal;

    fn model(perturb_output: bool) -> DenoiserModel<f64> {
        let mut rng = seeded(4);
        let mut m =
            DenoiserModel::new(3, &[16, 16], 8, NoiseSchedule::default(), &mut rng).unwrap();
        if perturb_output {
            let last = m.params.n_layers() - 1;
            for w in m.params.weight_mut(last) {
                *w = 0.5 * rng.sample::<f64, _>(StandardNormal);
            }
        }
        m
    }

    #[test]
    fn zero_residual_network_is_the_skeleton() {
        let m = model(false);
        let x = [0.4, -1.0, 2.5];
        for t in [0.0, 0.3, 0.8, 1.0] {
            let s = m.schedule().sigma(t).unwrap();
            let d = m.denoise(&x, t).unwrap();
            for (di, xi) in d.iter().zip(x) {
                assert!((di - xi / (s * s + 1.0)).abs() < 1e-14);
            }
            let v = [1.0, 2.0, -3.0];
            let g = m.denoise_vjp(&x, t, &v).unwrap();
            for (gi, vi) in g.iter().zip(v) {
                assert!((gi - vi / (s * s + 1.0)).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn small_sigma_output_is_near_identity() {
        let m = model(true);
        let x = [0.4, -1.0, 2.5];
        let d = m.denoise(&x, 0.0).unwrap();
        let lin = m.linearize(&x, 1e-3).unwrap();
        let h_norm = norm(m.forward_batch(&x, &[1e-3]).1.output());
        assert!(norm(&sub(&d, &x)) <= 1e-3 * (norm(&x) + h_norm));
        assert_eq!(lin.mean(), d.as_slice());
    }

    #[test]
    fn preconditioning_limits() {
        let tiny = Preconditioning::at(1e-8f64);
        assert!((tiny.skip - 1.0).abs() < 1e-12 && tiny.out < 1e-7);
        let huge = Preconditioning::at(1e8f64);
        assert!(huge.skip < 1e-15 && (huge.out - 1.0).abs() < 1e-12);
    }

    #[test]
    fn vjp_matches_central_differences() {
        let m = model(true);
        let x = [0.3, -0.2, 0.9];
        let t = 0.45;
        let delta = 1e-5;
        for i in 0..3 {
            let mut e = [0.0; 3];
            e[i] = 1.0;
            let row = m.denoise_vjp(&x, t, &e).unwrap();
            for j in 0..3 {
                let mut xp = x;
                let mut xm = x;
                xp[j] += delta;
                xm[j] -= delta;
                let fd =
                    (m.denoise(&xp, t).unwrap()[i] - m.denoise(&xm, t).unwrap()[i]) / (2.0 * delta);
                assert!(
                    (fd - row[j]).abs() <= 1e-4 * fd.abs().max(1e-3),
                    "{fd} vs {}",
                    row[j]
                );
            }
        }
    }

    #[test]
    fn vjp_is_linear() {
        let m = model(true);
        let x = [0.3, -0.2, 0.9];
        let lin = m.linearize(&x, 0.7).unwrap();
        let u = [1.0, -2.0, 0.5];
        let v = [0.2, 0.3, -1.1];
        let (a, b) = (1.7, -0.6);
        let combo: Vec<f64> = u.iter().zip(&v).map(|(p, q)| a * p + b * q).collect();
        let lhs = lin.vjp(&combo).unwrap();
        let (gu, gv) = (lin.vjp(&u).unwrap(), lin.vjp(&v).unwrap());
        for k in 0..3 {
            assert!((lhs[k] - a * gu[k] - b * gv[k]).abs() < 1e-10);
        }
    }

    #[test]
    fn vjp_agrees_with_forward_perturbation() {
        // v^T J u two ways: vjp(v) . u and (d(x + h u) - d(x - h u)) . v / 2h.
        let m = model(true);
        let x = [-0.5, 0.1, 0.7];
        let sigma = 0.3;
        let lin = m.linearize(&x, sigma).unwrap();
        let mut rng = seeded(9);
        for _ in 0..5 {
            let u: Vec<f64> = (0..3).map(|_| rng.sample(StandardNormal)).collect();
            let v: Vec<f64> = (0..3).map(|_| rng.sample(StandardNormal)).collect();
            let via_vjp: f64 = lin
                .vjp(&v)
                .unwrap()
                .iter()
                .zip(&u)
                .map(|(a, b)| a * b)
                .sum();
            let h = 1e-6;
            let xp: Vec<f64> = x.iter().zip(&u).map(|(a, b)| a + h * b).collect();
            let xm: Vec<f64> = x.iter().zip(&u).map(|(a, b)| a - h * b).collect();
            let dp = m.denoise_sigma(&xp, sigma).unwrap();
            let dm = m.denoise_sigma(&xm, sigma).unwrap();
            let via_fd: f64 = dp
                .iter()
                .zip(&dm)
                .zip(&v)
                .map(|((p, q), w)| (p - q) / (2.0 * h) * w)
                .sum();
            assert!((via_vjp - via_fd).abs() < 1e-4);
        }
    }

    #[test]
    fn score_vanishes_when_denoiser_is_identity() {
        // With c_skip -> 1 and zero residual, d(x) = x / (sigma^2 + 1) so the
        // score is -x / (sigma^2 + 1); at the origin it is exactly zero.
        let m = model(false);
        let s = m.score_from_denoiser(&[0.0, 0.0, 0.0], 0.5).unwrap();
        assert!(s.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn dimension_errors() {
        let m = model(false);
        assert!(m.denoise(&[1.0, 2.0], 0.5).is_err());
        assert!(m.denoise_vjp(&[1.0, 2.0, 3.0], 0.5, &[1.0]).is_err());
        assert!(m.denoise(&[1.0, 2.0, 3.0], 1.5).is_err());
    }

    #[test]
    fn batched_linearization_matches_rows() {
        let m = model(true);
        let mut rng = seeded(12);
        let xs: Vec<f64> = (0..15).map(|_| rng.sample(StandardNormal)).collect();
        let vs: Vec<f64> = (0..15).map(|_| rng.sample(StandardNormal)).collect();
        let sigmas = [0.01, 0.3, 1.0, 4.0, 60.0];
        let lin = m.linearize_batch(&xs, &sigmas).unwrap();
        let vjp = lin.vjp(&vs).unwrap();
        for b in 0..5 {
            let row = m.linearize(&xs[3 * b..3 * b + 3], sigmas[b]).unwrap();
            let d_mean = norm(&sub(row.mean(), &lin.mean()[3 * b..3 * b + 3]));
            let d_vjp = norm(&sub(
                &row.vjp(&vs[3 * b..3 * b + 3]).unwrap(),
                &vjp[3 * b..3 * b + 3],
            ));
            assert!(d_mean < 1e-12 && d_vjp < 1e-12);
        }
        assert!(lin.vjp(&vs[..3]).is_err());
    }
}
