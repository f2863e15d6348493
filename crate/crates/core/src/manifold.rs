//! Random closed curves in `R^N`, mixture priors concentrated on them, and
//! synthetic linear-Gaussian observation datasets.
//!
//! A curve is `gamma_i(s) = c_i + sum_{k=1}^{order} a_ik cos(2 pi k s + phi_ik)`
//! for `s` in `[0, 1)`, with raw amplitudes `|g| / k` (`g ~ N(0, 1)`),
//! uniform phases, and an affine rescale that maps each coordinate's range
//! onto `[-1, 1]`.
//!
//! Dataset container: the float-block layout of [`crate::io`] with magic
//! `DFEMDATA`. The JSON header is [`DatasetHeader`]; the payload holds
//! `n_obs` records, each `y` (`m` floats) followed by `A` (`m x N` floats,
//! row-major).

use std::f64::consts::TAU;
use std::path::Path;

use rand::Rng;
use rand_distr::{StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::gmm::GmmPrior;
use crate::io::{decode_container, encode_container, write_atomic};
use crate::linalg::{norm, standard_normal_vec, DenseMat};
use crate::rng::substream;
use crate::scalar::Scalar;

pub const DATASET_MAGIC: &[u8; 8] = b"DFEMDATA";
pub const DATASET_FORMAT_VERSION: u32 = 1;

/// Parameter-grid resolution used for rescaling and arclength tables.
const CURVE_GRID: usize = 1 << 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifoldCurve {
    dim: usize,
    order: usize,
    offset: Vec<f64>,
    /// `coefficients[i][k - 1] = (amplitude, phase)` for coordinate `i`.
    coefficients: Vec<Vec<(f64, f64)>>,
}

impl ManifoldCurve {
    /// Random curve in `R^dim` with `order` harmonics per coordinate.
    pub fn generate<R: Rng + ?Sized>(dim: usize, order: usize, rng: &mut R) -> Result<Self> {
        if dim < 2 || order < 1 {
            return Err(Error::Domain(format!(
                "curve needs dimension >= 2 and order >= 1, got {dim} and {order}"
            )));
        }
        let phase = Uniform::new(0.0, TAU).expect("valid range");
        let coefficients = (0..dim)
            .map(|_| {
                (1..=order)
                    .map(|k| {
                        let g: f64 = rng.sample(StandardNormal);
                        (g.abs() / k as f64, rng.sample(phase))
                    })
                    .collect()
            })
            .collect();
        let mut curve = Self {
            dim,
            order,
            offset: vec![0.0; dim],
            coefficients,
        };
        curve.rescale_to_unit_box();
        Ok(curve)
    }

    fn rescale_to_unit_box(&mut self) {
        let mut lo = vec![f64::INFINITY; self.dim];
        let mut hi = vec![f64::NEG_INFINITY; self.dim];
        for j in 0..CURVE_GRID {
            let p = self.point(j as f64 / CURVE_GRID as f64);
            for i in 0..self.dim {
                lo[i] = lo[i].min(p[i]);
                hi[i] = hi[i].max(p[i]);
            }
        }
        // A hair under 1 so that extrema between grid nodes stay inside.
        let half_width = 1.0 - 1e-6;
        for i in 0..self.dim {
            let scale = 2.0 * half_width / (hi[i] - lo[i]).max(f64::MIN_POSITIVE);
            for c in &mut self.coefficients[i] {
                c.0 *= scale;
            }
            self.offset[i] = -half_width - scale * lo[i];
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn coefficients(&self) -> &[Vec<(f64, f64)>] {
        &self.coefficients
    }

    /// `gamma(s)`; periodic with period 1.
    pub fn point(&self, s: f64) -> Vec<f64> {
        self.coefficients
            .iter()
            .zip(&self.offset)
            .map(|(coefs, &c)| {
                c + coefs
                    .iter()
                    .enumerate()
                    .map(|(k, &(a, phi))| a * (TAU * (k + 1) as f64 * s + phi).cos())
                    .sum::<f64>()
            })
            .collect()
    }

    /// `gamma'(s)`.
    pub fn tangent(&self, s: f64) -> Vec<f64> {
        self.coefficients
            .iter()
            .map(|coefs| {
                coefs
                    .iter()
                    .enumerate()
                    .map(|(k, &(a, phi))| {
                        let w = TAU * (k + 1) as f64;
                        -a * w * (w * s + phi).sin()
                    })
                    .sum::<f64>()
            })
            .collect()
    }

    /// Cumulative arclength at `j / CURVE_GRID` for `j = 0..=CURVE_GRID`
    /// (trapezoidal rule on the speed).
    fn arclength_table(&self) -> Vec<f64> {
        let h = 1.0 / CURVE_GRID as f64;
        let mut table = Vec::with_capacity(CURVE_GRID + 1);
        table.push(0.0);
        let mut prev = norm(&self.tangent(0.0));
        for j in 1..=CURVE_GRID {
            let speed = norm(&self.tangent(j as f64 * h));
            let last = *table.last().expect("non-empty");
            table.push(last + 0.5 * h * (prev + speed));
            prev = speed;
        }
        table
    }

    pub fn length(&self) -> f64 {
        *self.arclength_table().last().expect("non-empty")
    }

    /// Curve parameters of `k` points equally spaced in arclength, starting
    /// at `s = 0`.
    pub fn arclength_parameters(&self, k: usize) -> Vec<f64> {
        let table = self.arclength_table();
        let total = *table.last().expect("non-empty");
        let h = 1.0 / CURVE_GRID as f64;
        (0..k)
            .map(|j| {
                let target = total * j as f64 / k as f64;
                let idx = table.partition_point(|&l| l < target).clamp(1, CURVE_GRID);
                let (l0, l1) = (table[idx - 1], table[idx]);
                let frac = if l1 > l0 {
                    (target - l0) / (l1 - l0)
                } else {
                    0.0
                };
                ((idx - 1) as f64 + frac) * h
            })
            .collect()
    }
}

/// Mixture with `k_mix` equally weighted components centered on points of
/// `curve` equally spaced in arclength.
pub fn build_prior<T: Scalar>(
    curve: &ManifoldCurve,
    k_mix: usize,
    bandwidth: T,
) -> Result<GmmPrior<T>> {
    if k_mix < 2 {
        return Err(Error::Domain(format!(
            "k_mix must be at least 2, got {k_mix}"
        )));
    }
    let centers = curve
        .arclength_parameters(k_mix)
        .into_iter()
        .map(|s| curve.point(s).into_iter().map(T::lit).collect())
        .collect();
    GmmPrior::uniform(centers, bandwidth)
}

/// One measurement `y = A x + sigma_y z`.
#[derive(Clone, Debug, PartialEq)]
pub struct Observation<T> {
    y: Vec<T>,
    a: DenseMat<T>,
    sigma_y: T,
}

impl<T: Scalar> Observation<T> {
    /// `sigma_y` may be zero for noiseless data; the posterior routines then
    /// require `A V A^T` to be non-singular.
    pub fn new(y: Vec<T>, a: DenseMat<T>, sigma_y: T) -> Result<Self> {
        check_dim("observation rows", a.rows(), y.len())?;
        if !(sigma_y >= T::zero()) || !sigma_y.is_finite() {
            return Err(Error::Domain(format!(
                "sigma_y must be finite and >= 0, got {sigma_y}"
            )));
        }
        Ok(Self { y, a, sigma_y })
    }

    pub fn y(&self) -> &[T] {
        &self.y
    }

    pub fn a(&self) -> &DenseMat<T> {
        &self.a
    }

    pub fn sigma_y(&self) -> T {
        self.sigma_y
    }

    pub fn obs_dim(&self) -> usize {
        self.y.len()
    }

    pub fn latent_dim(&self) -> usize {
        self.a.cols()
    }
}

/// How measurement matrices are drawn.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum MeasurementDesign {
    /// `rows` rows drawn uniformly on the unit sphere.
    RandomSphere { rows: usize },
    /// `A = I`.
    Identity,
}

/// Recipe for a manifold dataset, sufficient to regenerate it bit for bit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ManifoldDatasetSpec {
    pub latent_dim: usize,
    pub order: usize,
    pub k_mix: usize,
    pub bandwidth: f64,
    pub n_obs: usize,
    pub obs_dim: usize,
    pub sigma_y: f64,
    pub seed: u64,
}

impl Default for ManifoldDatasetSpec {
    fn default() -> Self {
        Self {
            latent_dim: 5,
            order: 4,
            k_mix: 256,
            bandwidth: 0.05,
            n_obs: 1 << 16,
            obs_dim: 2,
            sigma_y: 1e-2,
            seed: 0,
        }
    }
}

impl ManifoldDatasetSpec {
    /// Generates the curve from stream `manifold`, the records from stream
    /// `data`, both under `seed`.
    pub fn generate<T: Scalar>(&self) -> Result<Dataset<T>> {
        let curve = ManifoldCurve::generate(
            self.latent_dim,
            self.order,
            &mut substream(self.seed, "manifold", 0),
        )?;
        let prior = build_prior(&curve, self.k_mix, T::lit(self.bandwidth))?;
        let mut ds = generate_dataset(
            &prior,
            self.n_obs,
            MeasurementDesign::RandomSphere { rows: self.obs_dim },
            T::lit(self.sigma_y),
            &mut substream(self.seed, "data", 0),
        )?;
        ds.meta.spec = Some(self.clone());
        ds.meta.seed = Some(self.seed);
        ds.meta.curve = Some(curve);
        ds.meta.prior = Some(prior.cast());
        Ok(ds)
    }
}

/// Provenance stored alongside a dataset.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub seed: Option<u64>,
    pub spec: Option<ManifoldDatasetSpec>,
    pub curve: Option<ManifoldCurve>,
    /// Ground-truth prior, when known.
    pub prior: Option<GmmPrior<f64>>,
    /// Producer-defined description, such as a tool version and config.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<serde_json::Value>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset<T> {
    observations: Vec<Observation<T>>,
    latent_dim: usize,
    pub meta: DatasetMeta,
}

impl<T: Scalar> Dataset<T> {
    pub fn new(observations: Vec<Observation<T>>, meta: DatasetMeta) -> Result<Self> {
        let latent_dim = observations
            .first()
            .map(Observation::latent_dim)
            .ok_or(Error::EmptyDataset)?;
        for o in &observations {
            check_dim("dataset latent dimension", latent_dim, o.latent_dim())?;
        }
        Ok(Self {
            observations,
            latent_dim,
            meta,
        })
    }

    pub fn observations(&self) -> &[Observation<T>] {
        &self.observations
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    pub fn ground_truth_prior(&self) -> Option<GmmPrior<T>> {
        self.meta.prior.as_ref().map(GmmPrior::cast)
    }
}

impl<T: Scalar> GmmPrior<T> {
    /// Converts the scalar type.
    pub fn cast<U: Scalar>(&self) -> GmmPrior<U> {
        let conv = |v: &[T]| {
            v.iter()
                .map(|x| U::lit(x.to_f64_lossy()))
                .collect::<Vec<U>>()
        };
        GmmPrior::new(
            self.centers().iter().map(|c| conv(c)).collect(),
            U::lit(self.bandwidth().to_f64_lossy()),
            conv(self.weights()),
        )
        .expect("validated prior stays valid under conversion")
    }
}

/// Draws `x ~ prior`, then `A` per `design`, then `y = A x + sigma_y z`, for
/// each of `n_obs` records in order.
pub fn generate_dataset<T: Scalar, R: Rng + ?Sized>(
    prior: &GmmPrior<T>,
    n_obs: usize,
    design: MeasurementDesign,
    sigma_y: T,
    rng: &mut R,
) -> Result<Dataset<T>> {
    if n_obs == 0 {
        return Err(Error::EmptyDataset);
    }
    let n = prior.dim();
    if let MeasurementDesign::RandomSphere { rows } = design {
        if rows == 0 || rows > n {
            return Err(Error::Domain(format!(
                "measurement rows must be in 1..={n}, got {rows}"
            )));
        }
    }
    let mut observations = Vec::with_capacity(n_obs);
    for _ in 0..n_obs {
        let x = prior.sample_prior(rng, 1).pop().expect("one sample");
        let a = match design {
            MeasurementDesign::Identity => DenseMat::identity(n),
            MeasurementDesign::RandomSphere { rows } => random_sphere_rows(rng, rows, n),
        };
        let z: Vec<T> = standard_normal_vec(rng, a.rows());
        let y = a
            .matvec(&x)
            .iter()
            .zip(&z)
            .map(|(&ax, &zi)| ax + sigma_y * zi)
            .collect();
        observations.push(Observation::new(y, a, sigma_y)?);
    }
    Dataset::new(observations, DatasetMeta::default())
}

/// `rows x n` matrix with rows uniform on the unit sphere.
pub fn random_sphere_rows<T: Scalar, R: Rng + ?Sized>(
    rng: &mut R,
    rows: usize,
    n: usize,
) -> DenseMat<T> {
    let mut data = Vec::with_capacity(rows * n);
    for _ in 0..rows {
        let g: Vec<T> = loop {
            let g: Vec<T> = standard_normal_vec(rng, n);
            if norm(&g) > T::zero() {
                break g;
            }
        };
        let inv = T::one() / norm(&g);
        data.extend(g.iter().map(|&v| v * inv));
    }
    DenseMat::from_vec(rows, n, data).expect("shape matches")
}

/// JSON header of the dataset container.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub format_version: u32,
    pub latent_dim: usize,
    pub obs_dim: usize,
    pub n_obs: usize,
    pub sigma_y: f64,
    #[serde(flatten)]
    pub meta: DatasetMeta,
}

pub fn encode_dataset<T: Scalar>(ds: &Dataset<T>) -> Result<Vec<u8>> {
    let first = &ds.observations[0];
    let (m, n, sigma_y) = (first.obs_dim(), ds.latent_dim, first.sigma_y());
    let mut payload = Vec::with_capacity(ds.len() * m * (n + 1));
    for o in &ds.observations {
        check_dim("dataset container observation rows", m, o.obs_dim())?;
        if o.sigma_y() != sigma_y {
            return Err(Error::Format(
                "dataset container requires one shared sigma_y".into(),
            ));
        }
        payload.extend(o.y().iter().map(|v| v.to_f64_lossy()));
        payload.extend(o.a().as_slice().iter().map(|v| v.to_f64_lossy()));
    }
    let header = DatasetHeader {
        format_version: DATASET_FORMAT_VERSION,
        latent_dim: n,
        obs_dim: m,
        n_obs: ds.len(),
        sigma_y: sigma_y.to_f64_lossy(),
        meta: ds.meta.clone(),
    };
    encode_container(DATASET_MAGIC, &header, &payload)
}

pub fn decode_dataset<T: Scalar>(bytes: &[u8]) -> Result<Dataset<T>> {
    let (header, payload): (DatasetHeader, Vec<f64>) = decode_container(DATASET_MAGIC, bytes)?;
    if header.format_version != DATASET_FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported dataset version {}",
            header.format_version
        )));
    }
    let (m, n) = (header.obs_dim, header.latent_dim);
    let record = m * (n + 1);
    if header.n_obs == 0 || record == 0 || payload.len() != header.n_obs * record {
        return Err(Error::Format(format!(
            "payload holds {} floats, header promises {} records of {record}",
            payload.len(),
            header.n_obs
        )));
    }
    let sigma_y = T::lit(header.sigma_y);
    let observations = payload
        .chunks_exact(record)
        .map(|chunk| {
            let y = chunk[..m].iter().map(|&v| T::lit(v)).collect();
            let a = DenseMat::from_vec(m, n, chunk[m..].iter().map(|&v| T::lit(v)).collect())?;
            Observation::new(y, a, sigma_y)
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(observations, header.meta)
}

pub fn save_dataset<T: Scalar>(path: &Path, ds: &Dataset<T>) -> Result<()> {
    write_atomic(path, &encode_dataset(ds)?)
}

pub fn load_dataset<T: Scalar>(path: &Path) -> Result<Dataset<T>> {
    decode_dataset(&std::fs::read(path)?)
}
