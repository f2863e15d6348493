//! Quick invariant suite behind `diffem check`: each check compares a kernel
//! with an independent computation on a small random instance.

use std::process::ExitCode;

use diffem_core::em::{gaussian_em_init, sample_prior_cloud, GaussianPriorFit};
use diffem_core::eval::{sinkhorn_divergence, PointCloud, SinkhornConfig};
use diffem_core::gmm::GmmPrior;
use diffem_core::linalg::{
    cg_solve, cholesky, cholesky_solve, gmres_solve, norm, standard_normal_vec, sub, DenseMat,
};
use diffem_core::manifold::{random_sphere_rows, Dataset, DatasetMeta, Observation};
use diffem_core::net::{param_grad_check, DenoiserModel, DsmBatch};
use diffem_core::posterior::{posterior_score, PosteriorScoreConfig};
use diffem_core::rng::{seeded, SimRng};
use diffem_core::sampler::SamplerConfig;
use diffem_core::schedule::NoiseSchedule;
use diffem_core::Result;
use rand::Rng;
use rand_distr::StandardNormal;

/// Largest observed error and the tolerance it must stay below.
struct Outcome {
    error: f64,
    tolerance: f64,
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

fn relative(a: &[f64], b: &[f64]) -> f64 {
    norm(&sub(a, b)) / norm(b).max(1e-300)
}

fn random_gmm(rng: &mut SimRng, k: usize, n: usize, bandwidth: f64) -> Result<GmmPrior<f64>> {
    let centers = (0..k).map(|_| standard_normal_vec(rng, n)).collect();
    let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.5..1.5)).collect();
    let total: f64 = raw.iter().sum();
    GmmPrior::new(centers, bandwidth, raw.iter().map(|w| w / total).collect())
}

fn tweedie_mean() -> Result<Outcome> {
    let mut rng = seeded(1);
    let prior = random_gmm(&mut rng, 4, 3, 0.3)?;
    let mut error = 0.0_f64;
    for sigma in [0.01, 0.1, 1.0, 3.0] {
        for _ in 0..10 {
            let x: Vec<f64> = standard_normal_vec(&mut rng, 3);
            let m = prior.posterior_moments(&x, sigma)?;
            let s = prior.score_xt(&x, sigma)?;
            let tweedie: Vec<f64> = x
                .iter()
                .zip(&s)
                .map(|(xi, si)| xi + sigma * sigma * si)
                .collect();
            error = error.max(max_abs_diff(&m.mean, &tweedie));
        }
    }
    Ok(Outcome {
        error,
        tolerance: 1e-10,
    })
}

fn spd_matrix(rng: &mut SimRng, n: usize) -> Result<DenseMat<f64>> {
    let b = DenseMat::from_vec(n, n, standard_normal_vec(rng, n * n))?;
    let mut a = b.matmul_t(&b);
    a.add_diag(1.0);
    Ok(a)
}

fn cg_dense() -> Result<Outcome> {
    let mut rng = seeded(2);
    let a = spd_matrix(&mut rng, 8)?;
    let b: Vec<f64> = standard_normal_vec(&mut rng, 8);
    let exact = cholesky_solve(&cholesky(&a)?, &b);
    let cg = cg_solve(&a, &b, None, 64, 1e-14)?;
    Ok(Outcome {
        error: relative(&cg.solution, &exact),
        tolerance: 1e-7,
    })
}

fn gmres_dense() -> Result<Outcome> {
    let mut rng = seeded(3);
    let mut a = DenseMat::from_vec(8, 8, standard_normal_vec(&mut rng, 64))?;
    a.add_diag(6.0);
    let x: Vec<f64> = standard_normal_vec(&mut rng, 8);
    let b = a.matvec(&x);
    let gm = gmres_solve(&a, &b, None, 8, 0.0)?;
    Ok(Outcome {
        error: relative(&gm.solution, &x),
        tolerance: 1e-7,
    })
}

/// A 16-unit denoiser with a perturbed (non-zero) output layer.
fn small_denoiser(rng: &mut SimRng) -> Result<DenoiserModel<f64>> {
    let mut model = DenoiserModel::new(3, &[16], 4, NoiseSchedule::default(), rng)?;
    for p in model.params_mut().as_mut_slice() {
        *p += 0.1 * rng.sample::<f64, _>(StandardNormal);
    }
    Ok(model)
}

fn denoiser_vjp() -> Result<Outcome> {
    let mut rng = seeded(4);
    let model = small_denoiser(&mut rng)?;
    let t = 0.4;
    let x: Vec<f64> = standard_normal_vec(&mut rng, 3);
    let v: Vec<f64> = standard_normal_vec(&mut rng, 3);
    let vjp = model.denoise_vjp(&x, t, &v)?;
    let h = 1e-6;
    let fd: Vec<f64> = (0..3)
        .map(|i| {
            let mut up = x.clone();
            let mut down = x.clone();
            up[i] += h;
            down[i] -= h;
            let du = model.denoise(&up, t)?;
            let dd = model.denoise(&down, t)?;
            Ok(du
                .iter()
                .zip(&dd)
                .zip(&v)
                .map(|((a, b), w)| w * (a - b) / (2.0 * h))
                .sum())
        })
        .collect::<Result<_>>()?;
    Ok(Outcome {
        error: relative(&vjp, &fd),
        tolerance: 1e-4,
    })
}

fn parameter_gradient() -> Result<Outcome> {
    let mut rng = seeded(5);
    let model = small_denoiser(&mut rng)?;
    let data: Vec<Vec<f64>> = (0..32).map(|_| standard_normal_vec(&mut rng, 3)).collect();
    let batch = DsmBatch::sample(&model, &data, 16, &mut rng)?;
    let error = param_grad_check(&model, &batch, Some(64), &mut rng)?;
    Ok(Outcome {
        error,
        tolerance: 1e-4,
    })
}

fn gaussian_posterior_score() -> Result<Outcome> {
    let mut rng = seeded(6);
    let prior = random_gmm(&mut rng, 1, 5, 0.7)?;
    let a = random_sphere_rows(&mut rng, 2, 5);
    let x: Vec<f64> = prior.sample_prior(&mut rng, 1).remove(0);
    let y: Vec<f64> = a
        .matvec(&x)
        .iter()
        .map(|v| v + 1e-2 * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let obs = Observation::new(y, a, 1e-2)?;
    let cfg = PosteriorScoreConfig::default();
    let mut error = 0.0_f64;
    for sigma in [0.05, 0.3, 1.0, 5.0] {
        let exact = prior.exact_diffused_posterior(&obs, sigma)?;
        for _ in 0..5 {
            let xt: Vec<f64> = x
                .iter()
                .map(|v| v + sigma * rng.sample::<f64, _>(StandardNormal))
                .collect();
            let got = posterior_score(&prior, &cfg, &xt, sigma, &obs)?;
            error = error.max(relative(&got, &exact.score(&xt)?));
        }
    }
    Ok(Outcome {
        error,
        tolerance: 1e-5,
    })
}

fn sinkhorn_point_masses() -> Result<Outcome> {
    let a = PointCloud::from_rows(&[vec![0.0, 1.0]])?;
    let b = PointCloud::from_rows(&[vec![0.5, -1.0]])?;
    let d: f64 = sinkhorn_divergence(&a, &b, &SinkhornConfig::default())?.divergence;
    Ok(Outcome {
        error: (d - 4.25).abs(),
        tolerance: 1e-6,
    })
}

fn sampler_determinism() -> Result<Outcome> {
    let fit = GaussianPriorFit::<f64>::standard(3);
    let source = fit.source()?;
    let schedule = NoiseSchedule::default();
    let cfg = SamplerConfig::default();
    let a = sample_prior_cloud(&source, 64, &schedule, &cfg, 7, 1)?;
    let b = sample_prior_cloud(&source, 64, &schedule, &cfg, 7, 0)?;
    let error = a
        .iter()
        .zip(&b)
        .map(|(x, y)| max_abs_diff(x, y))
        .fold(0.0, f64::max);
    Ok(Outcome {
        error,
        tolerance: 0.0,
    })
}

fn gaussian_em_monotone() -> Result<Outcome> {
    let mut rng = seeded(8);
    let truth = GaussianPriorFit::new(vec![1.0, -1.0, 0.5], spd_matrix(&mut rng, 3)?.scaled(0.3))?;
    let xs = truth.sample(&mut rng, 256)?;
    let obs = xs
        .iter()
        .map(|x| {
            let a = random_sphere_rows(&mut rng, 1, 3);
            let y = vec![a.matvec(x)[0] + 0.05 * rng.sample::<f64, _>(StandardNormal)];
            Observation::new(y, a, 0.05)
        })
        .collect::<Result<Vec<_>>>()?;
    let em = gaussian_em_init(&Dataset::new(obs, DatasetMeta::default())?, 20, 3)?;
    let error = em
        .log_evidence
        .windows(2)
        .map(|w| (w[0] - w[1]).max(0.0))
        .fold(0.0, f64::max);
    Ok(Outcome {
        error,
        tolerance: 1e-9,
    })
}

pub fn run() -> Result<ExitCode> {
    let checks: [(&str, fn() -> Result<Outcome>); 9] = [
        ("tweedie mean identity", tweedie_mean),
        ("conjugate gradient vs dense solve", cg_dense),
        ("GMRES vs dense solve", gmres_dense),
        ("denoiser input VJP vs finite differences", denoiser_vjp),
        ("loss gradient vs finite differences", parameter_gradient),
        (
            "posterior score exact for Gaussian prior",
            gaussian_posterior_score,
        ),
        ("Sinkhorn divergence of point masses", sinkhorn_point_masses),
        (
            "sampler determinism across worker counts",
            sampler_determinism,
        ),
        ("Gaussian EM log-evidence monotone", gaussian_em_monotone),
    ];
    let mut failed = 0;
    for (name, check) in checks {
        match check() {
            Ok(o) if o.error <= o.tolerance => {
                println!("PASS {name}: error {:.3e} <= {:.1e}", o.error, o.tolerance)
            }
            Ok(o) => {
                failed += 1;
                println!("FAIL {name}: error {:.3e} > {:.1e}", o.error, o.tolerance);
            }
            Err(e) => {
                failed += 1;
                println!("FAIL {name}: {e}");
            }
        }
    }
    println!(
        "{} of {} checks passed",
        checks.len() - failed,
        checks.len()
    );
    Ok(if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(3)
    })
}
