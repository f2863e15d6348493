use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use diffem_core::em::{
    gaussian_em_init, metrics_csv, resume_diem, run_diem, sample_posterior_cloud,
    sample_prior_cloud, EvalSettings, RunOutput, METRICS_HEADER,
};
use diffem_core::eval::{figure2_study, log_grid, sinkhorn_divergence, PointCloud};
use diffem_core::io::{load_samples, save_samples, write_atomic};
use diffem_core::linalg::DenseMat;
use diffem_core::manifold::{load_dataset, save_dataset, Observation};
use diffem_core::net::load_checkpoint;
use diffem_core::posterior::{CovarianceMode, PriorCovariance};
use diffem_core::rng::derive_seed;
use diffem_core::{DenoiserModelF64, Error, Result};
use log::info;
use serde::Deserialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::config::{parse_list, ExperimentConfig};
use crate::{
    EmOverrides, Fig2Args, GaussianInitArgs, GenDataArgs, RunEmArgs, SampleArgs, SinkhornArgs,
    VERSION,
};

/// File in a run directory holding the resolved experiment config.
pub const EXPERIMENT_FILE: &str = "experiment.toml";

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn set_some<T>(slot: &mut Option<T>, value: Option<T>) {
    if value.is_some() {
        *slot = value;
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

fn provenance(config: &impl serde::Serialize) -> Value {
    json!({ "version": VERSION, "config": config })
}

fn apply_em_overrides(cfg: &mut ExperimentConfig, o: &EmOverrides) {
    let em = &mut cfg.em;
    set(&mut em.iterations, o.k);
    set(&mut em.samples_per_obs, o.samples_per_obs);
    set(&mut em.sampler.steps, o.steps);
    set(&mut em.sampler.eta, o.eta);
    set(&mut em.posterior.mode, o.mode);
    set(&mut em.posterior.solver, o.solver);
    set(&mut em.posterior.solver_iters, o.solver_iters);
    set(&mut em.train.steps, o.train_steps);
    set(&mut em.train.batch_size, o.batch_size);
    set(&mut em.seed, o.seed);
    set(&mut em.workers, o.workers);
    if let Some(n) = o.eval_samples {
        em.eval.get_or_insert_with(EvalSettings::default).samples = n;
    }
}

pub fn gen_data(args: GenDataArgs) -> Result<ExitCode> {
    let mut cfg = ExperimentConfig::load(args.config.config.as_deref())?;
    let spec = &mut cfg.data;
    set(&mut spec.latent_dim, args.latent_dim);
    set(&mut spec.obs_dim, args.obs_dim);
    set(&mut spec.n_obs, args.n_obs);
    set(&mut spec.sigma_y, args.sigma_y);
    set(&mut spec.k_mix, args.k_mix);
    set(&mut spec.bandwidth, args.bandwidth);
    set(&mut spec.order, args.order);
    set(&mut spec.seed, args.seed);
    if spec.latent_dim == 0
        || spec.obs_dim == 0
        || spec.obs_dim > spec.latent_dim
        || spec.n_obs == 0
    {
        return Err(Error::Config(format!(
            "invalid dimensions N={} m={} n_obs={}",
            spec.latent_dim, spec.obs_dim, spec.n_obs
        )));
    }
    let mut ds = spec.generate::<f64>()?;
    ds.meta.provenance = Some(provenance(&cfg.data));
    save_dataset(&args.out, &ds)?;
    let bytes = std::fs::read(&args.out)?;
    println!(
        "dataset {}: N={} m={} n_obs={} sigma_y={}",
        args.out.display(),
        cfg.data.latent_dim,
        cfg.data.obs_dim,
        ds.len(),
        cfg.data.sigma_y
    );
    println!("sha256 {}", sha256_hex(&bytes));
    Ok(ExitCode::SUCCESS)
}

pub fn gaussian_init(args: GaussianInitArgs) -> Result<ExitCode> {
    let mut cfg = ExperimentConfig::load(args.config.config.as_deref())?;
    set_some(&mut cfg.dataset, args.dataset);
    set(&mut cfg.em.gaussian_iters, args.iters);
    set_some(&mut cfg.em.gaussian_rank, args.rank);
    let ds = load_dataset::<f64>(cfg.dataset_path()?)?;
    let rank = cfg.em.gaussian_rank.unwrap_or(ds.latent_dim());
    let em = gaussian_em_init(&ds, cfg.em.gaussian_iters, rank)?;
    let out = json!({
        "version": VERSION,
        "config": cfg,
        "fit": em.fit,
        "log_evidence": em.log_evidence,
    });
    write_atomic(&args.out, serde_json::to_string_pretty(&out)?.as_bytes())?;
    println!(
        "gaussian fit after {} iterations: log-evidence {:.6}",
        cfg.em.gaussian_iters,
        em.log_evidence.last().copied().unwrap_or(f64::NAN)
    );
    Ok(ExitCode::SUCCESS)
}

pub fn run_em(args: RunEmArgs) -> Result<ExitCode> {
    let (mut cfg, dir) = match &args.resume {
        Some(dir) => {
            let text = std::fs::read_to_string(dir.join(EXPERIMENT_FILE)).map_err(|e| {
                Error::Config(format!("{} is not a run directory: {e}", dir.display()))
            })?;
            (ExperimentConfig::from_toml(&text)?, dir.clone())
        }
        None => {
            let mut cfg = ExperimentConfig::load(args.config.config.as_deref())?;
            set_some(&mut cfg.dataset, args.dataset.clone());
            set_some(&mut cfg.out_dir, args.out_dir.clone());
            let dir = cfg.out_dir.clone().ok_or_else(|| {
                Error::Config("no output directory (--out-dir or `out_dir`)".into())
            })?;
            (cfg, dir)
        }
    };
    apply_em_overrides(&mut cfg, &args.em);
    cfg.out_dir = Some(dir.clone());
    cfg.em.validate()?;
    let ds = load_dataset::<f64>(cfg.dataset_path()?)?;
    std::fs::create_dir_all(&dir)?;
    write_atomic(&dir.join(EXPERIMENT_FILE), cfg.to_toml()?.as_bytes())?;
    let out = RunOutput {
        dir: dir.clone(),
        version: VERSION.to_string(),
    };
    info!("run directory {}", dir.display());
    let state = match args.resume {
        Some(_) => resume_diem(&ds, &cfg.em, &out)?,
        None => run_diem(&ds, &cfg.em, Some(&out))?,
    };
    if let Some(d) = state.gaussian_divergence {
        println!("gaussian initialization divergence {d}");
    }
    match state.metrics.last() {
        Some(m) => print!("{}", metrics_csv(std::slice::from_ref(m))),
        None => println!("{METRICS_HEADER}"),
    }
    Ok(ExitCode::SUCCESS)
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ObservationFile {
    y: Vec<f64>,
    a: Vec<Vec<f64>>,
    sigma_y: f64,
}

fn load_observation(path: &Path) -> Result<Observation<f64>> {
    let file: ObservationFile = serde_json::from_slice(&std::fs::read(path)?)?;
    Observation::new(file.y, DenseMat::from_rows(&file.a)?, file.sigma_y)
}

pub fn sample(args: SampleArgs) -> Result<ExitCode> {
    let mut cfg = ExperimentConfig::load(args.config.config.as_deref())?;
    set_some(&mut cfg.dataset, args.dataset.clone());
    apply_em_overrides(&mut cfg, &args.em);
    cfg.em.sampler.validate()?;
    if args.n == 0 {
        return Err(Error::Config("--n must be at least 1".into()));
    }
    let (model, _): (DenoiserModelF64, Value) =
        load_checkpoint(&args.checkpoint).map_err(|e| match e {
            Error::Io(io) => Error::Config(format!(
                "cannot read checkpoint {}: {io}",
                args.checkpoint.display()
            )),
            other => other,
        })?;
    let schedule = *model.schedule();
    let seed = derive_seed(cfg.em.seed, "sample", 0);
    let observation = match (&args.observation, args.record) {
        (Some(path), _) => Some(load_observation(path)?),
        (None, Some(i)) => {
            let ds = load_dataset::<f64>(cfg.dataset_path()?)?;
            let obs = ds.observations().get(i).cloned().ok_or_else(|| {
                Error::Config(format!(
                    "record {i} out of range (dataset has {})",
                    ds.len()
                ))
            })?;
            Some(obs)
        }
        (None, None) => None,
    };
    let samples = match &observation {
        None => sample_prior_cloud(
            &model,
            args.n,
            &schedule,
            &cfg.em.sampler,
            seed,
            cfg.em.workers,
        )?,
        Some(obs) => {
            let prior_cov = match cfg.em.posterior.mode {
                CovarianceMode::ShrinkPrior => {
                    let ds = load_dataset::<f64>(cfg.dataset_path()?)?;
                    let rank = cfg.em.gaussian_rank.unwrap_or(ds.latent_dim());
                    let fit = gaussian_em_init(&ds, cfg.em.gaussian_iters, rank)?.fit;
                    Some(Arc::new(PriorCovariance::new(&fit.cov)?))
                }
                _ => None,
            };
            let posterior = cfg.em.posterior.to_config(prior_cov);
            sample_posterior_cloud(
                &model,
                obs,
                args.n,
                &schedule,
                &cfg.em.sampler,
                &posterior,
                seed,
            )?
        }
    };
    let meta = json!({
        "version": VERSION,
        "config": cfg,
        "checkpoint": args.checkpoint,
        "kind": if observation.is_some() { "posterior" } else { "prior" },
        "observation": args.observation.as_ref().map(|p| p.display().to_string()),
        "record": args.record,
    });
    save_samples(&args.out, &samples, meta)?;
    println!(
        "wrote {} samples of dimension {} to {}",
        samples.len(),
        model.data_dim(),
        args.out.display()
    );
    Ok(ExitCode::SUCCESS)
}

pub fn fig2(args: Fig2Args) -> Result<ExitCode> {
    let mut cfg = ExperimentConfig::load(args.config.config.as_deref())?;
    let f = &mut cfg.fig2;
    set(&mut f.n_manifolds, args.manifolds);
    if let Some(k) = args.n_sigmas {
        f.sigmas = log_grid(args.sigma_min, args.sigma_max, k);
    }
    if let Some(m) = &args.modes {
        f.modes = parse_list(m)?;
    }
    set(&mut f.points, args.points);
    set(&mut f.seed, args.seed);
    let table = figure2_study(&cfg.fig2)?;
    let csv = table.to_csv();
    write_atomic(&args.out, csv.as_bytes())?;
    write_atomic(
        &sidecar(&args.out),
        serde_json::to_string_pretty(&provenance(&cfg.fig2))?.as_bytes(),
    )?;
    if let Some(cells) = &args.cells {
        write_atomic(cells, table.cells_csv().as_bytes())?;
    }
    print!("{csv}");
    Ok(ExitCode::SUCCESS)
}

/// `out.csv` -> `out.csv.json`.
pub fn sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn sinkhorn(args: SinkhornArgs) -> Result<ExitCode> {
    let mut cfg = diffem_core::eval::SinkhornConfig::default();
    set(&mut cfg.reg, args.reg);
    set(&mut cfg.max_iters, args.max_iters);
    let (_, a) = load_samples(&args.a)?;
    let (_, b) = load_samples(&args.b)?;
    let result = sinkhorn_divergence(
        &PointCloud::from_rows(&a)?,
        &PointCloud::from_rows(&b)?,
        &cfg,
    )?;
    println!(
        "divergence {} (violation {:.3e}, {} iterations, converged {})",
        result.divergence, result.violation, result.iterations, result.converged
    );
    Ok(ExitCode::SUCCESS)
}
