use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const DEFAULT_EMBED_DIM: usize = 64;
pub const EMBED_FREQ_MIN: f64 = 1e-2;
pub const EMBED_FREQ_MAX: f64 = 1e2;

/// Sinusoidal encoding of `log_sigma`: `embed_dim / 2` sines followed by the
/// matching cosines, at frequencies geometrically spaced over
/// `[EMBED_FREQ_MIN, EMBED_FREQ_MAX]`.
pub fn embed_log_sigma<T: Scalar>(log_sigma: T, embed_dim: usize) -> Result<Vec<T>> {
    if embed_dim == 0 || !embed_dim.is_multiple_of(2) {
        return Err(Error::Config(format!(
            "embedding dimension must be positive and even, got {embed_dim}"
        )));
    }
    let mut out = vec![T::zero(); embed_dim];
    write_embedding(log_sigma, &mut out);
    Ok(out)
}

pub(crate) fn write_embedding<T: Scalar>(log_sigma: T, out: &mut [T]) {
    let half = out.len() / 2;
    let ratio = if half > 1 {
        (EMBED_FREQ_MAX / EMBED_FREQ_MIN).powf(1.0 / (half - 1) as f64)
    } else {
        1.0
    };
    let mut freq = EMBED_FREQ_MIN;
    for k in 0..half {
        let phase = T::lit(freq) * log_sigma;
        out[k] = phase.sin();
        out[half + k] = phase.cos();
        freq *= ratio;
    }
}
