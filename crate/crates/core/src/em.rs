//! Empirical-Bayes outer loops.
//!
//! [`gaussian_em_init`] fits `N(mu, Sigma)` to linear-Gaussian observations
//! in closed form. [`run_diem`] then alternates posterior sampling of latents
//! under the current prior ([`expectation_step`]) with denoising score
//! matching on those latents, warm-starting the network every iteration and
//! persisting a checkpoint plus metrics after each one.

use std::ops::Range;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use log::{debug, info};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{check_dim, Error, Result};
use crate::eval::{PointCloud, SinkhornConfig, SinkhornReference};
use crate::io::write_atomic;
use crate::linalg::{
    cholesky, cholesky_log_det, cholesky_solve, from_eigen, standard_normal_vec, symmetric_eigen,
    DenseMat,
};
use crate::manifold::{Dataset, Observation};
use crate::net::{
    load_checkpoint, save_checkpoint, train_dsm, DenoiserModel, TrainConfig, DEFAULT_EMBED_DIM,
};
use crate::posterior::{
    posterior_score_batch, prior_score_batch, CovarianceMode, GaussianSource, PosteriorScoreConfig,
    PriorCovariance, ScoreSource, Solver,
};
use crate::rng::{derive_seed, seeded, substream, SimRng};
use crate::sampler::{pc_sample_batch, sample_batch, BatchScore, SamplerConfig};
use crate::scalar::Scalar;
use crate::schedule::{NoiseSchedule, DEFAULT_SIGMA_MAX, DEFAULT_SIGMA_MIN};

/// Chains advanced together in one batched sampler call.
pub const CHAIN_BATCH: usize = 128;

/// Records per work item of the closed-form Gaussian E-step.
const RECORD_CHUNK: usize = 256;

/// Smallest eigenvalue kept by the low-rank projection.
const RANK_FLOOR: f64 = 1e-8;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// `N(mean, cov)` prior over latents.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianPriorFit<T> {
    pub mean: Vec<T>,
    pub cov: DenseMat<T>,
}

/// Exact posterior of one record under a Gaussian prior.
struct RecordPosterior<T> {
    mean: Vec<T>,
    cov: DenseMat<T>,
    log_evidence: T,
}

impl<T: Scalar> GaussianPriorFit<T> {
    /// Checks the shapes and that `cov` admits a Cholesky factor.
    pub fn new(mean: Vec<T>, cov: DenseMat<T>) -> Result<Self> {
        check_dim("Gaussian fit covariance rows", mean.len(), cov.rows())?;
        check_dim("Gaussian fit covariance cols", mean.len(), cov.cols())?;
        cholesky(&cov)?;
        Ok(Self { mean, cov })
    }

    /// `N(0, I)`.
    pub fn standard(dim: usize) -> Self {
        Self {
            mean: vec![T::zero(); dim],
            cov: DenseMat::identity(dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Exact score source of this prior.
    pub fn source(&self) -> Result<GaussianSource<T>> {
        GaussianSource::new(self.mean.clone(), &self.cov)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, n: usize) -> Result<Vec<Vec<T>>> {
        let l = cholesky(&self.cov)?;
        Ok((0..n)
            .map(|_| {
                let z = standard_normal_vec::<T, R>(rng, self.dim());
                l.matvec(&z)
                    .iter()
                    .zip(&self.mean)
                    .map(|(&a, &m)| a + m)
                    .collect()
            })
            .collect())
    }

    /// `sum_i log N(y_i; A_i mu, sigma_y^2 I + A_i Sigma A_i^T)`.
    pub fn log_evidence(&self, dataset: &Dataset<T>) -> Result<T> {
        check_dim("Gaussian fit dimension", dataset.latent_dim(), self.dim())?;
        let parts: Vec<Result<T>> = dataset
            .observations()
            .par_chunks(RECORD_CHUNK)
            .enumerate()
            .map(|(c, chunk)| {
                let mut total = T::zero();
                for (j, obs) in chunk.iter().enumerate() {
                    total += self
                        .record_posterior(obs, c * RECORD_CHUNK + j)?
                        .log_evidence;
                }
                Ok(total)
            })
            .collect();
        parts.into_iter().sum()
    }

    fn record_posterior(&self, obs: &Observation<T>, record: usize) -> Result<RecordPosterior<T>> {
        let a = obs.a();
        let a_sigma = a.matmul(&self.cov);
        let mut s = a_sigma.matmul_t(a);
        s.add_diag(obs.sigma_y() * obs.sigma_y());
        let l = cholesky(&s).map_err(|e| Error::Chain {
            record,
            source: Box::new(e),
        })?;
        let resid: Vec<T> = obs
            .y()
            .iter()
            .zip(a.matvec(&self.mean))
            .map(|(&y, p)| y - p)
            .collect();
        let u = cholesky_solve(&l, &resid);
        let mut mean = self.mean.clone();
        for (mi, gi) in mean.iter_mut().zip(a_sigma.matvec_t(&u)) {
            *mi += gi;
        }
        let n = self.dim();
        let mut cov = self.cov.clone();
        for j in 0..n {
            let col: Vec<T> = (0..a.rows()).map(|r| a_sigma.row(r)[j]).collect();
            let g = cholesky_solve(&l, &col);
            let reduction = a_sigma.matvec_t(&g);
            for (i, r) in reduction.into_iter().enumerate() {
                cov.as_mut_slice()[i * n + j] -= r;
            }
        }
        let quad: T = resid.iter().zip(&u).map(|(&r, &v)| r * v).sum();
        let log_evidence =
            T::lit(-0.5) * (quad + cholesky_log_det(&l) + T::lit(LN_2PI * a.rows() as f64));
        Ok(RecordPosterior {
            mean,
            cov: cov.symmetrized(),
            log_evidence,
        })
    }
}

/// Result of [`gaussian_em_init`].
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianEm<T> {
    pub fit: GaussianPriorFit<T>,
    /// Log-evidence of the fit entering each iteration, then of the final
    /// fit (`iters + 1` values).
    pub log_evidence: Vec<T>,
}

/// Closed-form EM for a Gaussian prior, started from `N(0, I)`.
///
/// `rank < N` keeps the top `rank` eigen-directions of every updated
/// covariance and replaces the remaining eigenvalues by their mean.
pub fn gaussian_em_init<T: Scalar>(
    dataset: &Dataset<T>,
    iters: usize,
    rank: usize,
) -> Result<GaussianEm<T>> {
    gaussian_em_from(
        dataset,
        GaussianPriorFit::standard(dataset.latent_dim()),
        iters,
        rank,
    )
}

/// [`gaussian_em_init`] from an explicit starting fit.
pub fn gaussian_em_from<T: Scalar>(
    dataset: &Dataset<T>,
    init: GaussianPriorFit<T>,
    iters: usize,
    rank: usize,
) -> Result<GaussianEm<T>> {
    let n = dataset.latent_dim();
    check_dim("Gaussian EM initial fit", n, init.dim())?;
    if rank == 0 || rank > n {
        return Err(Error::Config(format!(
            "Gaussian EM rank must lie in [1, {n}], got {rank}"
        )));
    }
    let mut fit = init;
    let mut history = Vec::with_capacity(iters + 1);
    for it in 0..iters {
        let (next, evidence) = gaussian_em_step(dataset, &fit, rank)?;
        debug!("gaussian EM iteration {it}: log-evidence {evidence}");
        history.push(evidence);
        fit = next;
    }
    history.push(fit.log_evidence(dataset)?);
    Ok(GaussianEm {
        fit,
        log_evidence: history,
    })
}

/// One E+M round. Returns the updated fit and the log-evidence of `fit`.
fn gaussian_em_step<T: Scalar>(
    dataset: &Dataset<T>,
    fit: &GaussianPriorFit<T>,
    rank: usize,
) -> Result<(GaussianPriorFit<T>, T)> {
    let n = fit.dim();
    let chunks: Vec<Result<(Vec<Vec<T>>, DenseMat<T>, T)>> = dataset
        .observations()
        .par_chunks(RECORD_CHUNK)
        .enumerate()
        .map(|(c, chunk)| {
            let mut means = Vec::with_capacity(chunk.len());
            let mut cov_sum = DenseMat::zeros(n, n);
            let mut evidence = T::zero();
            for (j, obs) in chunk.iter().enumerate() {
                let post = fit.record_posterior(obs, c * RECORD_CHUNK + j)?;
                cov_sum = cov_sum.add(&post.cov);
                evidence += post.log_evidence;
                means.push(post.mean);
            }
            Ok((means, cov_sum, evidence))
        })
        .collect();
    let mut means = Vec::with_capacity(dataset.len());
    let mut cov_sum = DenseMat::zeros(n, n);
    let mut evidence = T::zero();
    for part in chunks {
        let (m, c, e) = part?;
        means.extend(m);
        cov_sum = cov_sum.add(&c);
        evidence += e;
    }
    let count = T::lit(dataset.len() as f64);
    let mut mean = vec![T::zero(); n];
    for m in &means {
        for (a, &b) in mean.iter_mut().zip(m) {
            *a += b;
        }
    }
    mean.iter_mut().for_each(|a| *a /= count);
    let mut cov = cov_sum;
    for m in &means {
        let d: Vec<T> = m.iter().zip(&mean).map(|(&a, &b)| a - b).collect();
        cov.add_outer(T::one(), &d, &d);
    }
    let mut cov = cov.scaled(T::one() / count).symmetrized();
    if rank < n {
        cov = project_rank(&cov, rank)?;
    }
    Ok((GaussianPriorFit::new(mean, cov)?, evidence))
}

/// Top-`rank` eigenpairs plus an isotropic floor equal to the mean of the
/// discarded eigenvalues.
fn project_rank<T: Scalar>(cov: &DenseMat<T>, rank: usize) -> Result<DenseMat<T>> {
    let (mut values, vectors) = symmetric_eigen(cov)?;
    let tail = &values[rank..];
    let floor =
        (tail.iter().copied().sum::<T>() / T::lit(tail.len() as f64)).max(T::lit(RANK_FLOOR));
    for v in values.iter_mut().skip(rank) {
        *v = floor;
    }
    Ok(from_eigen(&values, &vectors).symmetrized())
}

/// Settings of one posterior-sampling pass.
#[derive(Clone, Debug)]
pub struct EStepSettings<'a, T> {
    pub schedule: &'a NoiseSchedule<T>,
    pub sampler: &'a SamplerConfig,
    pub posterior: &'a PosteriorScoreConfig<T>,
    pub samples_per_obs: usize,
    /// Worker threads; 0 uses the ambient rayon pool.
    pub workers: usize,
    pub seed: u64,
}

/// Stream of chain `sample` of record `record`.
fn chain_rng(seed: u64, record: usize, sample: usize) -> SimRng {
    let mut rng = seeded(derive_seed(seed, "record", record as u64));
    rng.set_stream(sample as u64);
    rng
}

fn run_sampler<T: Scalar, F: BatchScore<T>>(
    score: &F,
    n: usize,
    schedule: &NoiseSchedule<T>,
    cfg: &SamplerConfig,
    rngs: &mut [SimRng],
) -> Result<Vec<T>> {
    if cfg.corrector_steps > 0 {
        pc_sample_batch(score, n, schedule, cfg, rngs)
    } else {
        sample_batch(score, n, schedule, cfg, rngs)
    }
}

/// Runs `f` on consecutive ranges of `CHAIN_BATCH` chains and concatenates
/// the results in chain order. The chunking does not depend on `workers`.
/// The first error in chain order wins.
fn run_chunked<T, F>(chains: usize, workers: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(Range<usize>) -> Result<Vec<T>> + Sync,
{
    let ranges: Vec<Range<usize>> = (0..chains)
        .step_by(CHAIN_BATCH)
        .map(|c0| c0..(c0 + CHAIN_BATCH).min(chains))
        .collect();
    let run = || ranges.into_par_iter().map(&f).collect::<Vec<_>>();
    let parts = if workers == 0 {
        run()
    } else {
        rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map_err(|e| Error::Config(format!("cannot build a {workers}-thread pool: {e}")))?
            .install(run)
    };
    let mut out = Vec::with_capacity(chains);
    for part in parts {
        out.extend(part?);
    }
    Ok(out)
}

/// Draws `samples_per_obs` posterior samples per record under `source`.
///
/// Returns `samples_per_obs * n_obs` latents, record-major. Chain `(i, j)`
/// uses its own stream derived from `(seed, i, j)`, so the output does not
/// depend on the worker count. A failing chain aborts with
/// [`Error::Chain`] naming its record.
pub fn expectation_step<T: Scalar>(
    source: &dyn ScoreSource<T>,
    dataset: &Dataset<T>,
    settings: &EStepSettings<'_, T>,
) -> Result<Vec<Vec<T>>> {
    let n = source.dim();
    check_dim("E-step latent dimension", n, dataset.latent_dim())?;
    settings.sampler.validate()?;
    settings.posterior.validate()?;
    let s = settings.samples_per_obs;
    if s == 0 {
        return Err(Error::Config("samples_per_obs must be at least 1".into()));
    }
    let observations = dataset.observations();
    let chains = observations.len() * s;
    let flat = run_chunked(chains, settings.workers, |range| {
        let obs: Vec<&Observation<T>> = range.clone().map(|c| &observations[c / s]).collect();
        let mut rngs: Vec<SimRng> = range
            .clone()
            .map(|c| chain_rng(settings.seed, c / s, c % s))
            .collect();
        let score =
            |xs: &[T], sigma: T| posterior_score_batch(source, settings.posterior, xs, sigma, &obs);
        run_sampler(&score, n, settings.schedule, settings.sampler, &mut rngs).map_err(
            |batch_err| attribute_failure(source, settings, &obs, range.clone(), batch_err),
        )
    })?;
    Ok(flat.chunks(n).map(<[T]>::to_vec).collect())
}

/// Replays the chains of a failed batch one at a time to find the first
/// failing record.
fn attribute_failure<T: Scalar>(
    source: &dyn ScoreSource<T>,
    settings: &EStepSettings<'_, T>,
    obs: &[&Observation<T>],
    range: Range<usize>,
    batch_err: Error,
) -> Error {
    let s = settings.samples_per_obs;
    for (c, o) in range.clone().zip(obs) {
        let score = |xs: &[T], sigma: T| {
            posterior_score_batch(
                source,
                settings.posterior,
                xs,
                sigma,
                std::slice::from_ref(o),
            )
        };
        let mut rng = [chain_rng(settings.seed, c / s, c % s)];
        if let Err(e) = run_sampler(
            &score,
            source.dim(),
            settings.schedule,
            settings.sampler,
            &mut rng,
        ) {
            return Error::Chain {
                record: c / s,
                source: Box::new(e),
            };
        }
    }
    Error::Chain {
        record: range.start / s,
        source: Box::new(batch_err),
    }
}

/// `n` unconditional samples of `source`, one stream per chain.
pub fn sample_prior_cloud<T: Scalar>(
    source: &dyn ScoreSource<T>,
    n: usize,
    schedule: &NoiseSchedule<T>,
    sampler: &SamplerConfig,
    seed: u64,
    workers: usize,
) -> Result<Vec<Vec<T>>> {
    sampler.validate()?;
    let dim = source.dim();
    let flat = run_chunked(n, workers, |range| {
        let mut rngs: Vec<SimRng> = range.map(|c| chain_rng(seed, c, 0)).collect();
        let score = |xs: &[T], sigma: T| prior_score_batch(source, xs, sigma);
        run_sampler(&score, dim, schedule, sampler, &mut rngs)
    })?;
    Ok(flat.chunks(dim).map(<[T]>::to_vec).collect())
}

/// `n` posterior samples of `source` given one observation.
pub fn sample_posterior_cloud<T: Scalar>(
    source: &dyn ScoreSource<T>,
    obs: &Observation<T>,
    n: usize,
    schedule: &NoiseSchedule<T>,
    sampler: &SamplerConfig,
    posterior: &PosteriorScoreConfig<T>,
    seed: u64,
) -> Result<Vec<Vec<T>>> {
    sampler.validate()?;
    posterior.validate()?;
    let dim = source.dim();
    let flat = run_chunked(n, 0, |range| {
        let obs = vec![obs; range.len()];
        let mut rngs: Vec<SimRng> = range.map(|c| chain_rng(seed, c, 0)).collect();
        let score = |xs: &[T], sigma: T| posterior_score_batch(source, posterior, xs, sigma, &obs);
        run_sampler(&score, dim, schedule, sampler, &mut rngs)
    })?;
    Ok(flat.chunks(dim).map(<[T]>::to_vec).collect())
}

/// Serializable form of [`PosteriorScoreConfig`]. The prior covariance of
/// the shrinkage mode comes from the Gaussian initialization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PosteriorSettings {
    pub mode: CovarianceMode,
    pub solver: Solver,
    pub solver_iters: usize,
    pub solver_eps: f64,
}

impl Default for PosteriorSettings {
    fn default() -> Self {
        Self {
            mode: CovarianceMode::Tweedie,
            solver: Solver::Cg,
            solver_iters: 3,
            solver_eps: 0.0,
        }
    }
}

impl PosteriorSettings {
    pub fn to_config<T: Scalar>(
        &self,
        prior_cov: Option<Arc<PriorCovariance<T>>>,
    ) -> PosteriorScoreConfig<T> {
        PosteriorScoreConfig {
            mode: self.mode,
            solver: self.solver,
            solver_iters: self.solver_iters,
            solver_eps: T::lit(self.solver_eps),
            prior_cov,
        }
    }
}

/// Divergence of model samples to ground-truth prior samples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSettings {
    pub samples: usize,
    pub sinkhorn: SinkhornConfig,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            samples: 2048,
            sinkhorn: SinkhornConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiemConfig {
    /// EM iterations `K`.
    pub iterations: usize,
    /// Posterior samples per record `S`.
    pub samples_per_obs: usize,
    pub hidden: Vec<usize>,
    pub embed_dim: usize,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub train: TrainConfig,
    pub sampler: SamplerConfig,
    pub posterior: PosteriorSettings,
    pub gaussian_iters: usize,
    /// Rank of the Gaussian initialization; absent means full rank.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gaussian_rank: Option<usize>,
    /// Requires a dataset that carries its ground-truth prior.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval: Option<EvalSettings>,
    pub seed: u64,
    /// Worker threads for the E-step and evaluation; 0 uses all cores.
    pub workers: usize,
}

impl Default for DiemConfig {
    fn default() -> Self {
        Self {
            iterations: 32,
            samples_per_obs: 1,
            hidden: vec![256, 256, 256],
            embed_dim: DEFAULT_EMBED_DIM,
            sigma_min: DEFAULT_SIGMA_MIN,
            sigma_max: DEFAULT_SIGMA_MAX,
            train: TrainConfig::default(),
            sampler: SamplerConfig::default(),
            posterior: PosteriorSettings::default(),
            gaussian_iters: 16,
            gaussian_rank: None,
            eval: None,
            seed: 0,
            workers: 0,
        }
    }
}

impl DiemConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples_per_obs == 0 {
            return Err(Error::Config("samples_per_obs must be at least 1".into()));
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(Error::Config(format!(
                "invalid hidden widths {:?}",
                self.hidden
            )));
        }
        if self.posterior.solver_iters == 0 || !(self.posterior.solver_eps >= 0.0) {
            return Err(Error::Config(format!(
                "invalid posterior settings {:?}",
                self.posterior
            )));
        }
        if let Some(eval) = &self.eval {
            if eval.samples == 0 {
                return Err(Error::Config("eval.samples must be at least 1".into()));
            }
            eval.sinkhorn.validate()?;
        }
        self.train.validate()?;
        self.sampler.validate()?;
        NoiseSchedule::new(self.sigma_min, self.sigma_max)?;
        Ok(())
    }

    pub fn schedule<T: Scalar>(&self) -> Result<NoiseSchedule<T>> {
        NoiseSchedule::new(T::lit(self.sigma_min), T::lit(self.sigma_max))
    }

    /// Everything that influences the trajectory, i.e. all fields except the
    /// iteration count and the worker count.
    fn trajectory_key(&self) -> Self {
        Self {
            iterations: 0,
            workers: 0,
            ..self.clone()
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct IterationMetrics {
    pub iteration: usize,
    /// Mean minibatch loss over the first and last 1% of training steps.
    pub loss_start: f64,
    pub loss_end: f64,
    /// Mean loss of consecutive windows of `LOSS_WINDOW` steps.
    pub loss_trace: Vec<f64>,
    pub divergence: Option<f64>,
    pub estep_seconds: f64,
    pub mstep_seconds: f64,
    pub eval_seconds: f64,
}

/// Steps averaged into one entry of [`IterationMetrics::loss_trace`].
pub const LOSS_WINDOW: usize = 64;

pub const METRICS_HEADER: &str =
    "iteration,loss_start,loss_end,divergence,estep_seconds,mstep_seconds,eval_seconds";

impl IterationMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{:.3},{:.3},{:.3}",
            self.iteration,
            self.loss_start,
            self.loss_end,
            self.divergence.map_or_else(String::new, |d| d.to_string()),
            self.estep_seconds,
            self.mstep_seconds,
            self.eval_seconds
        )
    }
}

pub fn metrics_csv(metrics: &[IterationMetrics]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for m in metrics {
        out.push_str(&m.csv_row());
        out.push('\n');
    }
    out
}

#[derive(Clone, Debug)]
pub struct EmState<T> {
    /// Completed EM iterations.
    pub iteration: usize,
    pub model: DenoiserModel<T>,
    pub gaussian: GaussianPriorFit<T>,
    /// Divergence of the Gaussian initialization to the ground truth.
    pub gaussian_divergence: Option<f64>,
    pub metrics: Vec<IterationMetrics>,
}

/// Where and how a run persists itself.
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub dir: PathBuf,
    /// Version string embedded in every written file.
    pub version: String,
}

pub const STATE_FILE: &str = "state.json";
pub const METRICS_FILE: &str = "metrics.csv";

pub fn checkpoint_path(dir: &Path, iteration: usize) -> PathBuf {
    dir.join(format!("checkpoint_{iteration:04}.ckpt"))
}

#[derive(Serialize, Deserialize)]
struct StateFile {
    version: String,
    config: DiemConfig,
    iteration: usize,
    gaussian: GaussianPriorFit<f64>,
    gaussian_divergence: Option<f64>,
    metrics: Vec<IterationMetrics>,
}

fn cast_fit<T: Scalar, U: Scalar>(fit: &GaussianPriorFit<T>) -> Result<GaussianPriorFit<U>> {
    let cast = |v: &[T]| -> Vec<U> { v.iter().map(|x| U::lit(x.to_f64_lossy())).collect() };
    Ok(GaussianPriorFit {
        mean: cast(&fit.mean),
        cov: DenseMat::from_vec(fit.cov.rows(), fit.cov.cols(), cast(fit.cov.as_slice()))?,
    })
}

fn persist<T: Scalar>(state: &EmState<T>, config: &DiemConfig, out: &RunOutput) -> Result<()> {
    std::fs::create_dir_all(&out.dir)?;
    let meta = json!({
        "iteration": state.iteration,
        "config": config,
        "version": out.version,
    });
    save_checkpoint(
        &checkpoint_path(&out.dir, state.iteration),
        &state.model,
        &meta,
    )?;
    let file = StateFile {
        version: out.version.clone(),
        config: config.clone(),
        iteration: state.iteration,
        gaussian: cast_fit(&state.gaussian)?,
        gaussian_divergence: state.gaussian_divergence,
        metrics: state.metrics.clone(),
    };
    write_atomic(
        &out.dir.join(STATE_FILE),
        serde_json::to_string_pretty(&file)?.as_bytes(),
    )?;
    write_atomic(
        &out.dir.join(METRICS_FILE),
        metrics_csv(&state.metrics).as_bytes(),
    )
}

/// Ground-truth samples plus the cached self-transport of their cloud.
struct Evaluator<T> {
    truth: PointCloud<T>,
    settings: EvalSettings,
}

impl<T: Scalar> Evaluator<T> {
    fn new(dataset: &Dataset<T>, config: &DiemConfig) -> Result<Option<Self>> {
        let Some(settings) = config.eval.clone() else {
            return Ok(None);
        };
        let prior = dataset.ground_truth_prior().ok_or_else(|| {
            Error::Config("evaluation needs a dataset with a ground-truth prior".into())
        })?;
        let rows = prior.sample_prior(
            &mut substream(config.seed, "eval-truth", 0),
            settings.samples,
        );
        Ok(Some(Self {
            truth: PointCloud::from_rows(&rows)?,
            settings,
        }))
    }

    fn divergence(&self, samples: &[Vec<T>]) -> Result<f64> {
        let reference = SinkhornReference::new(&self.truth, &self.settings.sinkhorn)?;
        let result = reference.divergence(&PointCloud::from_rows(samples)?)?;
        Ok(result.divergence.to_f64_lossy())
    }
}

/// Fits the Gaussian initialization, builds the initial network and runs
/// `config.iterations` EM iterations. With `out`, every iteration (and the
/// initial state) is persisted so that [`resume_diem`] can continue.
pub fn run_diem<T: Scalar>(
    dataset: &Dataset<T>,
    config: &DiemConfig,
    out: Option<&RunOutput>,
) -> Result<EmState<T>> {
    config.validate()?;
    let n = dataset.latent_dim();
    let rank = config.gaussian_rank.unwrap_or(n);
    let gaussian = gaussian_em_init(dataset, config.gaussian_iters, rank)?.fit;
    let model = DenoiserModel::new(
        n,
        &config.hidden,
        config.embed_dim,
        config.schedule()?,
        &mut substream(config.seed, "init", 0),
    )?;
    let evaluator = Evaluator::new(dataset, config)?;
    let gaussian_divergence = match &evaluator {
        Some(ev) => {
            let samples = gaussian.sample(
                &mut substream(config.seed, "eval-gaussian", 0),
                ev.settings.samples,
            )?;
            Some(ev.divergence(&samples)?)
        }
        None => None,
    };
    let state = EmState {
        iteration: 0,
        model,
        gaussian,
        gaussian_divergence,
        metrics: Vec::new(),
    };
    if let Some(out) = out {
        persist(&state, config, out)?;
    }
    continue_diem(state, dataset, config, evaluator.as_ref(), out)
}

/// Reloads the last persisted state in `out.dir` and continues up to
/// `config.iterations`. Only `iterations` and `workers` may differ from
/// the configuration the run was started with.
pub fn resume_diem<T: Scalar>(
    dataset: &Dataset<T>,
    config: &DiemConfig,
    out: &RunOutput,
) -> Result<EmState<T>> {
    config.validate()?;
    let file: StateFile = serde_json::from_slice(&std::fs::read(out.dir.join(STATE_FILE))?)?;
    if file.config.trajectory_key() != config.trajectory_key() {
        return Err(Error::Config(
            "resume configuration differs from the original run in more than iterations or workers"
                .into(),
        ));
    }
    let (model, _) = load_checkpoint(&checkpoint_path(&out.dir, file.iteration))?;
    let state = EmState {
        iteration: file.iteration,
        model,
        gaussian: cast_fit(&file.gaussian)?,
        gaussian_divergence: file.gaussian_divergence,
        metrics: file.metrics,
    };
    let evaluator = Evaluator::new(dataset, config)?;
    continue_diem(state, dataset, config, evaluator.as_ref(), Some(out))
}

fn continue_diem<T: Scalar>(
    mut state: EmState<T>,
    dataset: &Dataset<T>,
    config: &DiemConfig,
    evaluator: Option<&Evaluator<T>>,
    out: Option<&RunOutput>,
) -> Result<EmState<T>> {
    let schedule = config.schedule()?;
    let gaussian_source = state.gaussian.source()?;
    let prior_cov = match config.posterior.mode {
        CovarianceMode::ShrinkPrior => Some(Arc::new(PriorCovariance::new(&state.gaussian.cov)?)),
        _ => None,
    };
    let posterior = config.posterior.to_config(prior_cov);
    for k in state.iteration + 1..=config.iterations {
        let t0 = Instant::now();
        let source: &dyn ScoreSource<T> = if k == 1 {
            &gaussian_source
        } else {
            &state.model
        };
        let settings = EStepSettings {
            schedule: &schedule,
            sampler: &config.sampler,
            posterior: &posterior,
            samples_per_obs: config.samples_per_obs,
            workers: config.workers,
            seed: derive_seed(config.seed, "estep", k as u64),
        };
        let latents = expectation_step(source, dataset, &settings)?;
        let estep_seconds = t0.elapsed().as_secs_f64();

        let t1 = Instant::now();
        let (model, report) = train_dsm(
            state.model.clone(),
            &latents,
            &config.train,
            &mut substream(config.seed, "train", k as u64),
        )?;
        drop(latents);
        let mstep_seconds = t1.elapsed().as_secs_f64();

        let t2 = Instant::now();
        let divergence = match evaluator {
            Some(ev) => {
                let samples = sample_prior_cloud(
                    &model,
                    ev.settings.samples,
                    &schedule,
                    &config.sampler,
                    derive_seed(config.seed, "eval", k as u64),
                    config.workers,
                )?;
                Some(ev.divergence(&samples)?)
            }
            None => None,
        };
        let eval_seconds = t2.elapsed().as_secs_f64();

        let (loss_start, loss_end) = report.start_end_means((report.losses.len() / 100).max(1));
        let loss_trace = report
            .losses
            .chunks(LOSS_WINDOW)
            .map(|w| w.iter().sum::<f64>() / w.len() as f64)
            .collect();
        let metrics = IterationMetrics {
            iteration: k,
            loss_start,
            loss_end,
            loss_trace,
            divergence,
            estep_seconds,
            mstep_seconds,
            eval_seconds,
        };
        info!("EM iteration {k}: {}", metrics.csv_row());
        state.model = model;
        state.iteration = k;
        state.metrics.push(metrics);
        if let Some(out) = out {
            persist(&state, config, out)?;
        }
    }
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::standard_normal_vec;
    use crate::manifold::{random_sphere_rows, DatasetMeta};

    /// Records `y = A x + sigma_y z` with `x ~ N(mean, cov)`.
    fn gaussian_dataset(
        mean: &[f64],
        cov: &DenseMat<f64>,
        n_obs: usize,
        rows: Option<usize>,
        sigma_y: f64,
        seed: u64,
    ) -> Dataset<f64> {
        let truth = GaussianPriorFit::new(mean.to_vec(), cov.clone()).unwrap();
        let mut rng = seeded(seed);
        let xs = truth.sample(&mut rng, n_obs).unwrap();
        let n = mean.len();
        let obs = xs
            .iter()
            .map(|x| {
                let a = match rows {
                    Some(m) => random_sphere_rows(&mut rng, m, n),
                    None => DenseMat::identity(n),
                };
                let z: Vec<f64> = standard_normal_vec(&mut rng, a.rows());
                let y = a
                    .matvec(x)
                    .iter()
                    .zip(&z)
                    .map(|(&p, &e)| p + sigma_y * e)
                    .collect();
                Observation::new(y, a, sigma_y).unwrap()
            })
            .collect();
        Dataset::new(obs, DatasetMeta::default()).unwrap()
    }

    fn test_cov() -> DenseMat<f64> {
        DenseMat::from_rows(&[
            vec![1.0, 0.3, -0.2],
            vec![0.3, 0.5, 0.1],
            vec![-0.2, 0.1, 0.8],
        ])
        .unwrap()
    }

    /// Brute-force Gaussian posterior via the joint covariance of (x, y).
    fn joint_posterior(
        fit: &GaussianPriorFit<f64>,
        obs: &Observation<f64>,
    ) -> (Vec<f64>, DenseMat<f64>) {
        let a = obs.a();
        let cross = fit.cov.matmul_t(a);
        let mut s = a.matmul(&cross);
        s.add_diag(obs.sigma_y() * obs.sigma_y());
        let s_inv = crate::linalg::cholesky_inverse(&cholesky(&s).unwrap());
        let gain = cross.matmul(&s_inv);
        let resid: Vec<f64> = obs
            .y()
            .iter()
            .zip(a.matvec(&fit.mean))
            .map(|(y, p)| y - p)
            .collect();
        let mean = fit
            .mean
            .iter()
            .zip(gain.matvec(&resid))
            .map(|(m, g)| m + g)
            .collect();
        let cov = fit.cov.sub(&gain.matmul_t(&cross));
        (mean, cov)
    }

    #[test]
    fn record_posterior_matches_joint_conditioning() {
        let ds = gaussian_dataset(&[0.5, -1.0, 0.2], &test_cov(), 5, Some(2), 0.1, 1);
        let fit = GaussianPriorFit::new(vec![0.1, 0.2, 0.3], test_cov().scaled(1.5)).unwrap();
        for (i, obs) in ds.observations().iter().enumerate() {
            let post = fit.record_posterior(obs, i).unwrap();
            let (mean, cov) = joint_posterior(&fit, obs);
            for (a, b) in post.mean.iter().zip(&mean) {
                assert!((a - b).abs() < 1e-12);
            }
            assert!(post.cov.sub(&cov).frobenius_norm() < 1e-12);
        }
    }

    #[test]
    fn identity_observation_limit_gives_sample_moments() {
        let ds = gaussian_dataset(&[0.5, -1.0, 0.2], &test_cov(), 500, None, 1e-6, 2);
        let init =
            GaussianPriorFit::new(vec![3.0, 3.0, 3.0], DenseMat::identity(3).scaled(7.0)).unwrap();
        let fit = gaussian_em_from(&ds, init, 1, 3).unwrap().fit;
        let ys: Vec<Vec<f64>> = ds.observations().iter().map(|o| o.y().to_vec()).collect();
        let (mean, cov) = PointCloud::from_rows(&ys).unwrap().moments();
        for (a, b) in fit.mean.iter().zip(&mean) {
            assert!((a - b).abs() < 1e-3);
        }
        assert!(fit.cov.sub(&cov).frobenius_norm() < 1e-3);
    }

    #[test]
    fn evidence_is_monotone_and_rank_projection_is_spd() {
        let ds = gaussian_dataset(&[0.5, -1.0, 0.2], &test_cov(), 400, Some(1), 0.05, 3);
        let em = gaussian_em_init(&ds, 20, 3).unwrap();
        for w in em.log_evidence.windows(2) {
            assert!(w[1] >= w[0] - 1e-9, "{} -> {}", w[0], w[1]);
        }
        let low = gaussian_em_init(&ds, 5, 1).unwrap().fit;
        let (values, _) = symmetric_eigen(&low.cov).unwrap();
        assert!(values[2] > 0.0);
        assert!((values[1] - values[2]).abs() < 1e-9 * values[0]);
        assert!(gaussian_em_init(&ds, 1, 4).is_err());
        assert!(gaussian_em_init(&ds, 1, 0).is_err());
    }

    #[test]
    fn singular_likelihood_covariance_names_the_record() {
        let mut obs: Vec<Observation<f64>> = (0..3)
            .map(|_| {
                Observation::new(
                    vec![0.0, 0.0],
                    DenseMat::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap(),
                    0.1,
                )
                .unwrap()
            })
            .collect();
        obs[2] = Observation::new(vec![0.0, 0.0], DenseMat::zeros(2, 2), 0.0).unwrap();
        let ds = Dataset::new(obs, DatasetMeta::default()).unwrap();
        match gaussian_em_init(&ds, 1, 2) {
            Err(Error::Chain { record, .. }) => assert_eq!(record, 2),
            other => panic!("expected a chain error, got {other:?}"),
        }
    }

    fn estep_settings<'a>(
        schedule: &'a NoiseSchedule<f64>,
        sampler: &'a SamplerConfig,
        posterior: &'a PosteriorScoreConfig<f64>,
        samples_per_obs: usize,
        workers: usize,
    ) -> EStepSettings<'a, f64> {
        EStepSettings {
            schedule,
            sampler,
            posterior,
            samples_per_obs,
            workers,
            seed: 11,
        }
    }

    #[test]
    fn estep_output_is_independent_of_workers() {
        let ds = gaussian_dataset(&[0.5, -1.0, 0.2], &test_cov(), 4, Some(2), 0.05, 4);
        let source = GaussianPriorFit::new(vec![0.0; 3], test_cov())
            .unwrap()
            .source()
            .unwrap();
        let schedule = NoiseSchedule::default();
        let sampler = SamplerConfig::default();
        let posterior = PosteriorScoreConfig::default();
        let one = expectation_step(
            &source,
            &ds,
            &estep_settings(&schedule, &sampler, &posterior, 1, 1),
        )
        .unwrap();
        let four = expectation_step(
            &source,
            &ds,
            &estep_settings(&schedule, &sampler, &posterior, 1, 4),
        )
        .unwrap();
        assert_eq!(one.len(), 4);
        assert_eq!(one, four);
        let three = expectation_step(
            &source,
            &ds,
            &estep_settings(&schedule, &sampler, &posterior, 3, 2),
        )
        .unwrap();
        assert_eq!(three.len(), 12);
    }

    #[test]
    fn estep_failure_reports_record() {
        let mut obs: Vec<Observation<f64>> = (0..5)
            .map(|_| {
                Observation::new(
                    vec![0.3],
                    DenseMat::from_rows(&[vec![1.0, 0.0]]).unwrap(),
                    0.1,
                )
                .unwrap()
            })
            .collect();
        obs[3] = Observation::new(
            vec![0.3],
            DenseMat::from_rows(&[vec![1.0, 0.0]]).unwrap(),
            0.0,
        )
        .unwrap();
        let ds = Dataset::new(obs, DatasetMeta::default()).unwrap();
        let source = GaussianPriorFit::<f64>::standard(2).source().unwrap();
        let schedule = NoiseSchedule::default();
        let sampler = SamplerConfig {
            steps: 8,
            ..SamplerConfig::default()
        };
        let posterior = PosteriorScoreConfig::with_mode(CovarianceMode::Dps);
        match expectation_step(
            &source,
            &ds,
            &estep_settings(&schedule, &sampler, &posterior, 1, 1),
        ) {
            Err(Error::Chain { record, .. }) => assert_eq!(record, 3),
            other => panic!("expected a chain error, got {other:?}"),
        }
    }

    #[test]
    fn diem_with_zero_iterations_returns_initial_state() {
        let ds = gaussian_dataset(&[0.5, -1.0, 0.2], &test_cov(), 64, Some(2), 0.05, 5);
        let config = DiemConfig {
            iterations: 0,
            hidden: vec![8],
            embed_dim: 4,
            gaussian_iters: 3,
            ..DiemConfig::default()
        };
        let state = run_diem(&ds, &config, None).unwrap();
        assert_eq!(state.iteration, 0);
        assert!(state.metrics.is_empty());
        let init = DenoiserModel::new(
            3,
            &[8],
            4,
            NoiseSchedule::default(),
            &mut substream(0, "init", 0),
        )
        .unwrap();
        assert_eq!(state.model.params(), init.params());
        assert_eq!(state.gaussian, gaussian_em_init(&ds, 3, 3).unwrap().fit);
    }

    #[test]
    fn config_round_trips_and_rejects_unknown_keys() {
        let config = DiemConfig {
            eval: Some(EvalSettings::default()),
            gaussian_rank: Some(2),
            ..DiemConfig::default()
        };
        let text = serde_json::to_string(&config).unwrap();
        assert_eq!(serde_json::from_str::<DiemConfig>(&text).unwrap(), config);
        assert!(serde_json::from_str::<DiemConfig>(r#"{"iterationz": 3}"#).is_err());
        assert!(DiemConfig {
            samples_per_obs: 0,
            ..DiemConfig::default()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn metrics_csv_has_header_and_rows() {
        assert_eq!(metrics_csv(&[]), format!("{METRICS_HEADER}\n"));
        let m = IterationMetrics {
            iteration: 2,
            loss_start: 1.5,
            loss_end: 0.25,
            divergence: Some(0.125),
            ..IterationMetrics::default()
        };
        let csv = metrics_csv(&[m]);
        assert_eq!(
            csv.lines().nth(1).unwrap(),
            "2,1.5,0.25,0.125,0.000,0.000,0.000"
        );
    }
}
