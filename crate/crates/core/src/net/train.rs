//! Denoising score matching with Adam, global-norm gradient clipping and a
//! linearly decaying learning rate.

use log::debug;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::denoiser::{DenoiserModel, Preconditioning};
use super::mlp::{backward, MlpParams};
use crate::error::{Error, Result};
use crate::linalg::{norm, standard_normal_vec};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub steps: usize,
    pub lr_init: f64,
    pub lr_final: f64,
    pub grad_clip: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 1024,
            steps: 16384,
            lr_init: 1e-3,
            lr_final: 1e-6,
            grad_clip: 1.0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.batch_size >= 1
            && self.lr_final > 0.0
            && self.lr_init >= self.lr_final
            && self.grad_clip > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.adam_eps > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "invalid training configuration {self:?}"
            )))
        }
    }

    /// Learning rate at optimizer step `step` (0-based).
    pub fn learning_rate(&self, step: usize) -> f64 {
        if self.steps <= 1 {
            return self.lr_init;
        }
        let frac = step.min(self.steps - 1) as f64 / (self.steps - 1) as f64;
        self.lr_init + (self.lr_final - self.lr_init) * frac
    }
}

/// Adam state for one flat parameter vector.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    first: Vec<T>,
    second: Vec<T>,
    step: i32,
    beta1: T,
    beta2: T,
    eps: T,
}

impl<T: Scalar> Adam<T> {
    pub fn new(len: usize, cfg: &TrainConfig) -> Self {
        Self {
            first: vec![T::zero(); len],
            second: vec![T::zero(); len],
            step: 0,
            beta1: T::lit(cfg.beta1),
            beta2: T::lit(cfg.beta2),
            eps: T::lit(cfg.adam_eps),
        }
    }

    pub fn update(&mut self, params: &mut [T], grads: &[T], lr: T) {
        self.step += 1;
        let one = T::one();
        let bc1 = one - self.beta1.powi(self.step);
        let bc2 = one - self.beta2.powi(self.step);
        for (((p, &g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(self.first.iter_mut())
            .zip(self.second.iter_mut())
        {
            *m = self.beta1 * *m + (one - self.beta1) * g;
            *v = self.beta2 * *v + (one - self.beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

/// Rescales `grads` so that its Euclidean norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm<T: Scalar>(grads: &mut [T], max_norm: T) -> T {
    let n = norm(grads);
    if n > max_norm {
        let s = max_norm / n;
        grads.iter_mut().for_each(|g| *g *= s);
    }
    n
}

/// One fixed minibatch of the denoising objective.
#[derive(Clone, Debug)]
pub struct DsmBatch<T> {
    /// Clean samples, row-major `batch x N`.
    pub clean: Vec<T>,
    pub sigmas: Vec<T>,
    pub weights: Vec<T>,
    /// Standard normal noise, same shape as `clean`.
    pub noise: Vec<T>,
}

impl<T: Scalar> DsmBatch<T> {
    pub fn from_times(
        model: &DenoiserModel<T>,
        clean: Vec<T>,
        times: &[T],
        noise: Vec<T>,
    ) -> Result<Self> {
        let schedule = model.schedule();
        let sigmas = times
            .iter()
            .map(|&t| schedule.sigma(t))
            .collect::<Result<Vec<T>>>()?;
        let weights = times
            .iter()
            .map(|&t| schedule.loss_weight(t))
            .collect::<Result<Vec<T>>>()?;
        crate::error::check_dim("DSM batch", times.len() * model.data_dim(), clean.len())?;
        crate::error::check_dim("DSM noise", clean.len(), noise.len())?;
        Ok(Self {
            clean,
            sigmas,
            weights,
            noise,
        })
    }

    pub fn sample<R: Rng + ?Sized>(
        model: &DenoiserModel<T>,
        dataset: &[Vec<T>],
        batch: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let n = model.data_dim();
        let mut clean = Vec::with_capacity(batch * n);
        let mut times = Vec::with_capacity(batch);
        for _ in 0..batch {
            let i = rng.random_range(0..dataset.len());
            clean.extend_from_slice(&dataset[i]);
            times.push(model.schedule().sample_train_time(rng));
        }
        let noise = standard_normal_vec(rng, batch * n);
        Self::from_times(model, clean, &times, noise)
    }

    pub fn len(&self) -> usize {
        self.sigmas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sigmas.is_empty()
    }
}

/// Mean over the batch of `lambda_t ||d(x + sigma z, t) - x||^2`; when
/// `grads` is given, adds the parameter gradient of that mean into it.
pub fn dsm_loss<T: Scalar>(
    model: &DenoiserModel<T>,
    batch: &DsmBatch<T>,
    grads: Option<&mut MlpParams<T>>,
) -> T {
    let n = model.data_dim();
    let b = batch.len();
    let noisy: Vec<T> = batch
        .clean
        .chunks(n)
        .zip(batch.noise.chunks(n))
        .zip(&batch.sigmas)
        .flat_map(|((x, z), &s)| x.iter().zip(z).map(move |(&xi, &zi)| xi + s * zi))
        .collect();
    let (denoised, tape) = model.forward_batch(&noisy, &batch.sigmas);
    let inv_b = T::one() / T::lit(b as f64);
    let mut loss = T::zero();
    let mut d_h = vec![T::zero(); b * n];
    for r in 0..b {
        let c = Preconditioning::at(batch.sigmas[r]);
        let w = batch.weights[r];
        for k in r * n..(r + 1) * n {
            let diff = denoised[k] - batch.clean[k];
            loss += w * diff * diff;
            d_h[k] = T::lit(2.0) * w * diff * c.out * inv_b;
        }
    }
    if let Some(g) = grads {
        backward(model.params(), &tape, &d_h, Some(g));
    }
    loss * inv_b
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Minibatch loss at every optimizer step.
    pub losses: Vec<f64>,
}

impl TrainReport {
    /// Mean of the first and last `window` losses.
    pub fn start_end_means(&self, window: usize) -> (f64, f64) {
        let w = window.min(self.losses.len()).max(1);
        let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len().max(1) as f64;
        (
            mean(&self.losses[..w.min(self.losses.len())]),
            mean(&self.losses[self.losses.len().saturating_sub(w)..]),
        )
    }
}

/// Trains `model` (warm start) on `dataset` for `cfg.steps` Adam steps with
/// a fresh optimizer state.
pub fn train_dsm<T: Scalar, R: Rng + ?Sized>(
    mut model: DenoiserModel<T>,
    dataset: &[Vec<T>],
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<(DenoiserModel<T>, TrainReport)> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    for x in dataset {
        crate::error::check_dim("training sample", model.data_dim(), x.len())?;
    }
    let widths = model.params().widths().to_vec();
    let mut adam = Adam::new(model.params().len(), cfg);
    let mut grads = MlpParams::zeros(&widths)?;
    let clip = T::lit(cfg.grad_clip);
    let mut report = TrainReport {
        losses: Vec::with_capacity(cfg.steps),
    };

    for step in 0..cfg.steps {
        let batch = DsmBatch::sample(&model, dataset, cfg.batch_size, rng)?;
        grads.as_mut_slice().iter_mut().for_each(|g| *g = T::zero());
        let loss = dsm_loss(&model, &batch, Some(&mut grads));
        if !loss.is_finite() {
            return Err(Error::NonFinite {
                context: "denoising score matching loss".into(),
                iteration: step,
            });
        }
        clip_global_norm(grads.as_mut_slice(), clip);
        let lr = T::lit(cfg.learning_rate(step));
        adam.update(model.params_mut().as_mut_slice(), grads.as_slice(), lr);
        report.losses.push(loss.to_f64_lossy());
        if step % 1024 == 0 {
            debug!("train step {step}: loss {:.5}", loss.to_f64_lossy());
        }
    }
    if !model.params().is_finite() {
        return Err(Error::NonFinite {
            context: "denoiser parameters after training".into(),
            iteration: cfg.steps,
        });
    }
    Ok((model, report))
}

/// Largest relative discrepancy between the analytic parameter gradient of
/// [`dsm_loss`] on `batch` and central finite differences.
///
/// Probes every parameter when `probes` is `None`, otherwise that many
/// indices drawn from `rng`.
pub fn param_grad_check<T: Scalar, R: Rng + ?Sized>(
    model: &DenoiserModel<T>,
    batch: &DsmBatch<T>,
    probes: Option<usize>,
    rng: &mut R,
) -> Result<T> {
    let mut grads = MlpParams::zeros(model.params().widths())?;
    dsm_loss(model, batch, Some(&mut grads));
    let total = model.params().len();
    let indices: Vec<usize> = match probes {
        None => (0..total).collect(),
        Some(k) => (0..k).map(|_| rng.random_range(0..total)).collect(),
    };
    let delta = T::lit(1e-6);
    let floor = T::lit(1e-6);
    let mut worst = T::zero();
    let mut probe = model.clone();
    for &i in &indices {
        let orig = model.params().as_slice()[i];
        probe.params_mut().as_mut_slice()[i] = orig + delta;
        let up = dsm_loss(&probe, batch, None);
        probe.params_mut().as_mut_slice()[i] = orig - delta;
        let down = dsm_loss(&probe, batch, None);
        probe.params_mut().as_mut_slice()[i] = orig;
        let fd = (up - down) / (T::lit(2.0) * delta);
        let an = grads.as_slice()[i];
        let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(floor);
        worst = worst.max(rel);
    }
    Ok(worst)
}
