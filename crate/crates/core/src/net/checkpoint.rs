//! Model checkpoint container.
//!
//! All integers and floats are little-endian.
//!
//! | offset          | size            | field                                      |
//! |-----------------|-----------------|--------------------------------------------|
//! | 0               | 8               | magic `DFEMCKPT`                           |
//! | 8               | 4               | `u32` format version (1)                   |
//! | 12              | 4               | `u32` embedding dimension                  |
//! | 16              | 8               | `f64` sigma_min                            |
//! | 24              | 8               | `f64` sigma_max                            |
//! | 32              | 4               | `u32` number of widths `W` (layers + 1)    |
//! | 36              | 4 W             | `u32` widths `(in, hidden.., out)`         |
//! | 36 + 4 W        | 8               | `u64` metadata length `J`                  |
//! | 44 + 4 W        | J               | UTF-8 JSON metadata (config, version)      |
//! | 44 + 4 W + J    | 8 P             | `f64` parameters, per layer weight then bias |
//!
//! Weights are stored `out x in` row-major. `P` is implied by the widths.

use std::path::Path;

use serde_json::Value;

use super::denoiser::DenoiserModel;
use super::mlp::MlpParams;
use crate::error::{Error, Result};
use crate::io::ByteReader;
use crate::scalar::Scalar;
use crate::schedule::NoiseSchedule;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"DFEMCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn encode_checkpoint<T: Scalar>(model: &DenoiserModel<T>, meta: &Value) -> Vec<u8> {
    let widths = model.params().widths();
    let meta_bytes = serde_json::to_vec(meta).expect("JSON values always serialize");
    let mut out =
        Vec::with_capacity(48 + 4 * widths.len() + meta_bytes.len() + 8 * model.params().len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(model.embed_dim() as u32).to_le_bytes());
    out.extend_from_slice(&model.schedule().sigma_min().to_f64_lossy().to_le_bytes());
    out.extend_from_slice(&model.schedule().sigma_max().to_f64_lossy().to_le_bytes());
    out.extend_from_slice(&(widths.len() as u32).to_le_bytes());
    for &w in widths {
        out.extend_from_slice(&(w as u32).to_le_bytes());
    }
    out.extend_from_slice(&(meta_bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(&meta_bytes);
    for &p in model.params().as_slice() {
        out.extend_from_slice(&p.to_f64_lossy().to_le_bytes());
    }
    out
}

pub fn decode_checkpoint<T: Scalar>(bytes: &[u8]) -> Result<(DenoiserModel<T>, Value)> {
    let mut r = ByteReader::new(bytes);
    if r.take(8)? != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let embed_dim = r.u32()? as usize;
    let sigma_min = r.f64()?;
    let sigma_max = r.f64()?;
    let n_widths = r.u32()? as usize;
    if !(2..=1024).contains(&n_widths) {
        return Err(Error::Format(format!("implausible layer count {n_widths}")));
    }
    let widths = (0..n_widths)
        .map(|_| r.u32().map(|w| w as usize))
        .collect::<Result<Vec<_>>>()?;
    let meta_len = r.u64()? as usize;
    let meta: Value = serde_json::from_slice(r.take(meta_len)?)?;
    let template = MlpParams::<T>::zeros(&widths)?;
    let data = (0..template.len())
        .map(|_| r.f64().map(T::lit))
        .collect::<Result<Vec<_>>>()?;
    if !r.is_empty() {
        return Err(Error::Format("trailing bytes after parameters".into()));
    }
    let params = MlpParams::from_flat(&widths, data)?;
    let schedule = NoiseSchedule::new(T::lit(sigma_min), T::lit(sigma_max))?;
    Ok((
        DenoiserModel::from_parts(params, schedule, embed_dim)?,
        meta,
    ))
}

pub fn save_checkpoint<T: Scalar>(
    path: &Path,
    model: &DenoiserModel<T>,
    meta: &Value,
) -> Result<()> {
    crate::io::write_atomic(path, &encode_checkpoint(model, meta))
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<(DenoiserModel<T>, Value)> {
    decode_checkpoint(&std::fs::read(path)?)
}
