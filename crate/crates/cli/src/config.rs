//! Experiment configuration file.
//!
//! One TOML file with optional top-level `dataset` and `out_dir` paths and
//! three tables:
//!
//! ```toml
//! dataset = "data/manifold.dfem"
//! out_dir = "runs/tweedie"
//!
//! [data]            # gen-data: latent_dim, order, k_mix, bandwidth, n_obs, obs_dim, sigma_y, seed
//! n_obs = 4096
//!
//! [em]              # gaussian-init, run-em, sample
//! iterations = 8    # K
//! samples_per_obs = 1
//! hidden = [256, 256, 256]
//! seed = 0
//! [em.train]        # batch_size, steps, lr_init, lr_final, grad_clip, beta1, beta2, adam_eps
//! steps = 4096
//! [em.sampler]      # steps (T), eta, corrector_steps, corrector_step_scale
//! [em.posterior]    # mode, solver, solver_iters, solver_eps
//! [em.eval]         # samples, [em.eval.sinkhorn]
//!
//! [fig2]            # n_manifolds, sigmas, modes, points, sigma_y, seed, ...
//! ```
//!
//! Every key is optional; missing keys take the documented defaults and
//! unknown keys are rejected. Command-line flags override file values.

use std::path::{Path, PathBuf};

use diffem_core::em::DiemConfig;
use diffem_core::eval::Fig2Config;
use diffem_core::manifold::ManifoldDatasetSpec;
use diffem_core::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dataset: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    pub data: ManifoldDatasetSpec,
    pub em: DiemConfig,
    pub fig2: Fig2Config,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("config file: {e}")))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("cannot serialize config: {e}")))
    }

    /// Defaults when `path` is `None`.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| {
                    Error::Config(format!("cannot read config {}: {e}", p.display()))
                })?;
                Self::from_toml(&text)
            }
        }
    }

    pub fn dataset_path(&self) -> Result<&Path> {
        self.dataset.as_deref().ok_or_else(|| {
            Error::Config("no dataset given (--dataset or `dataset` in the config file)".into())
        })
    }
}

/// Parses `a,b,c` into values via `FromStr`.
pub fn parse_list<T: std::str::FromStr<Err = Error>>(text: &str) -> Result<Vec<T>> {
    text.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(str::parse)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use diffem_core::posterior::CovarianceMode;

    #[test]
    fn toml_round_trip_preserves_every_field() {
        let mut cfg = ExperimentConfig {
            dataset: Some("data.dfem".into()),
            ..Default::default()
        };
        cfg.em.iterations = 3;
        cfg.em.gaussian_rank = Some(2);
        cfg.em.posterior.mode = CovarianceMode::SigmaT;
        cfg.fig2.sigmas = vec![0.1, 1.0];
        let back = ExperimentConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn partial_files_take_defaults_and_unknown_keys_fail() {
        let cfg = ExperimentConfig::from_toml("[em.train]\nsteps = 7\n").unwrap();
        assert_eq!(cfg.em.train.steps, 7);
        assert_eq!(cfg.em.iterations, DiemConfig::default().iterations);
        assert!(ExperimentConfig::from_toml("[em]\nbogus = 1\n").is_err());
    }

    #[test]
    fn list_parsing_skips_blanks() {
        let modes: Vec<CovarianceMode> = parse_list("tweedie, sigma_t,").unwrap();
        assert_eq!(modes, vec![CovarianceMode::Tweedie, CovarianceMode::SigmaT]);
        assert!(parse_list::<CovarianceMode>("tweedie,nope").is_err());
    }
}
