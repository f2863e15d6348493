//! `diffem`: data generation, Gaussian initialization, diffusion EM,
//! sampling and evaluation from the command line.
//!
//! Exit codes: 0 success, 2 configuration or input error, 3 numerical
//! failure (divergence, non-finite values, indefinite matrices).

mod check;
mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use diffem_core::posterior::{CovarianceMode, Solver};

pub const VERSION: &str = env!("DIFFEM_VERSION");

#[derive(Parser, Debug)]
#[command(name = "diffem", version = VERSION, about = "Diffusion priors from noisy linear observations by Monte-Carlo EM")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a random-manifold dataset of linear-Gaussian observations.
    GenData(GenDataArgs),
    /// Fit the closed-form Gaussian prior by EM.
    GaussianInit(GaussianInitArgs),
    /// Run diffusion EM, writing checkpoints and metrics per iteration.
    RunEm(RunEmArgs),
    /// Draw prior or posterior samples from a checkpoint.
    Sample(SampleArgs),
    /// Posterior-approximation divergence study over random manifolds.
    Fig2(Fig2Args),
    /// Sinkhorn divergence between two sample files.
    Sinkhorn(SinkhornArgs),
    /// Run the quick invariant suite.
    Check,
}

#[derive(Args, Debug)]
struct ConfigArg {
    /// Experiment config file (TOML); flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GenDataArgs {
    #[command(flatten)]
    config: ConfigArg,
    /// Output dataset file.
    #[arg(long)]
    out: PathBuf,
    /// Latent dimension N.
    #[arg(long)]
    latent_dim: Option<usize>,
    /// Observation rows m.
    #[arg(long)]
    obs_dim: Option<usize>,
    #[arg(long)]
    n_obs: Option<usize>,
    #[arg(long)]
    sigma_y: Option<f64>,
    #[arg(long)]
    k_mix: Option<usize>,
    #[arg(long)]
    bandwidth: Option<f64>,
    /// Fourier order of the random curve.
    #[arg(long)]
    order: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct GaussianInitArgs {
    #[command(flatten)]
    config: ConfigArg,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    iters: Option<usize>,
    /// Covariance rank; defaults to full rank.
    #[arg(long)]
    rank: Option<usize>,
    /// Output JSON file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EmOverrides {
    /// EM iterations K.
    #[arg(long)]
    k: Option<usize>,
    /// Posterior samples per observation S.
    #[arg(long)]
    samples_per_obs: Option<usize>,
    /// Sampler discretization steps T.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long)]
    mode: Option<CovarianceMode>,
    #[arg(long)]
    solver: Option<Solver>,
    #[arg(long)]
    solver_iters: Option<usize>,
    /// Optimizer steps per EM iteration.
    #[arg(long)]
    train_steps: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Model samples for the per-iteration divergence to the ground truth.
    #[arg(long)]
    eval_samples: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; defaults to all available cores.
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Args, Debug)]
struct RunEmArgs {
    #[command(flatten)]
    config: ConfigArg,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Continue the run stored in this directory.
    #[arg(long, conflicts_with_all = ["config", "dataset", "out_dir"])]
    resume: Option<PathBuf>,
    #[command(flatten)]
    em: EmOverrides,
}

#[derive(Args, Debug)]
struct SampleArgs {
    #[command(flatten)]
    config: ConfigArg,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value_t = 1024)]
    n: usize,
    /// JSON observation `{"y": [..], "a": [[..], ..], "sigma_y": ..}`;
    /// switches to posterior sampling.
    #[arg(long, conflicts_with = "record")]
    observation: Option<PathBuf>,
    /// Use record `i` of `--dataset` as the observation.
    #[arg(long, requires = "dataset")]
    record: Option<usize>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[command(flatten)]
    em: EmOverrides,
    /// Output samples file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct Fig2Args {
    #[command(flatten)]
    config: ConfigArg,
    #[arg(long)]
    manifolds: Option<usize>,
    /// Number of log-spaced noise levels in [sigma_min, sigma_max].
    #[arg(long)]
    n_sigmas: Option<usize>,
    #[arg(long, default_value_t = 1e-2)]
    sigma_min: f64,
    #[arg(long, default_value_t = 1e1)]
    sigma_max: f64,
    /// Comma-separated covariance modes.
    #[arg(long)]
    modes: Option<String>,
    /// Points per compared cloud.
    #[arg(long)]
    points: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Summary CSV (one row per noise level and mode).
    #[arg(long)]
    out: PathBuf,
    /// Optional per-manifold CSV.
    #[arg(long)]
    cells: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SinkhornArgs {
    a: PathBuf,
    b: PathBuf,
    #[arg(long)]
    reg: Option<f64>,
    #[arg(long)]
    max_iters: Option<usize>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => commands::gen_data(a),
        Command::GaussianInit(a) => commands::gaussian_init(a),
        Command::RunEm(a) => commands::run_em(a),
        Command::Sample(a) => commands::sample(a),
        Command::Fig2(a) => commands::fig2(a),
        Command::Sinkhorn(a) => commands::sinkhorn(a),
        Command::Check => check::run(),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_numerical() {
                ExitCode::from(3)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
