//! Diffusion priors from linear-Gaussian observations: Monte-Carlo EM over a
//! denoising network, moment-matching posterior sampling, and the Gaussian
//! mixture oracles used to check both.

pub mod em;
pub mod error;
pub mod eval;
pub mod gmm;
pub mod io;
pub mod linalg;
pub mod manifold;
pub mod net;
pub mod posterior;
pub mod rng;
pub mod sampler;
pub mod scalar;
pub mod schedule;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type DenseMatF64 = linalg::DenseMat<f64>;
pub type NoiseScheduleF64 = schedule::NoiseSchedule<f64>;
pub type GmmPriorF64 = gmm::GmmPrior<f64>;
pub type ObservationF64 = manifold::Observation<f64>;
pub type DatasetF64 = manifold::Dataset<f64>;
pub type DenoiserModelF64 = net::DenoiserModel<f64>;
pub type GaussianSourceF64 = posterior::GaussianSource<f64>;
pub type PosteriorScoreConfigF64 = posterior::PosteriorScoreConfig<f64>;
pub type PointCloudF64 = eval::PointCloud<f64>;
pub type GaussianPriorFitF64 = em::GaussianPriorFit<f64>;
pub type EmStateF64 = em::EmState<f64>;
