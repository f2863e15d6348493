//! Multi-layer perceptron with SiLU activations and (parameter-free) layer
//! normalization after every hidden activation, with a hand-written reverse
//! pass. Parameters live in one flat buffer so the optimizer, gradient
//! clipping and checkpointing can treat them as a single vector.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::scalar::{gemm, Scalar, Trans};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Flat parameter vector plus the layer widths `(in, hidden.., out)`.
///
/// Layer `l` occupies `weight (out x in, row-major)` followed by `bias (out)`.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpParams<T> {
    widths: Vec<usize>,
    data: Vec<T>,
}

fn layer_offsets(widths: &[usize]) -> Vec<usize> {
    let mut offsets = Vec::with_capacity(widths.len());
    let mut acc = 0;
    offsets.push(0);
    for w in widths.windows(2) {
        acc += w[0] * w[1] + w[1];
        offsets.push(acc);
    }
    offsets
}

impl<T: Scalar> MlpParams<T> {
    pub fn zeros(widths: &[usize]) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::Config(format!(
                "MLP needs at least input and output widths, all positive; got {widths:?}"
            )));
        }
        let total = *layer_offsets(widths).last().expect("non-empty");
        Ok(Self {
            widths: widths.to_vec(),
            data: vec![T::zero(); total],
        })
    }

    /// Fan-in variance scaling for hidden layers; the output layer starts at
    /// zero so the untrained network outputs exactly zero.
    pub fn init<R: Rng + ?Sized>(widths: &[usize], rng: &mut R) -> Result<Self> {
        let mut params = Self::zeros(widths)?;
        for l in 0..params.n_layers() - 1 {
            let fan_in = params.widths[l];
            let std = T::lit(1.0 / (fan_in as f64).sqrt());
            for w in params.weight_mut(l) {
                *w = std * T::lit(rng.sample::<f64, _>(StandardNormal));
            }
        }
        Ok(params)
    }

    pub fn from_flat(widths: &[usize], data: Vec<T>) -> Result<Self> {
        let mut p = Self::zeros(widths)?;
        crate::error::check_dim("MLP parameter count", p.data.len(), data.len())?;
        p.data = data;
        Ok(p)
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn n_layers(&self) -> usize {
        self.widths.len() - 1
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().expect("non-empty")
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    fn offset(&self, l: usize) -> usize {
        self.widths
            .windows(2)
            .take(l)
            .map(|w| w[0] * w[1] + w[1])
            .sum()
    }

    pub fn weight(&self, l: usize) -> &[T] {
        let o = self.offset(l);
        &self.data[o..o + self.widths[l] * self.widths[l + 1]]
    }

    pub fn weight_mut(&mut self, l: usize) -> &mut [T] {
        let o = self.offset(l);
        let n = self.widths[l] * self.widths[l + 1];
        &mut self.data[o..o + n]
    }

    pub fn bias(&self, l: usize) -> &[T] {
        let o = self.offset(l) + self.widths[l] * self.widths[l + 1];
        &self.data[o..o + self.widths[l + 1]]
    }

    pub fn bias_mut(&mut self, l: usize) -> &mut [T] {
        let o = self.offset(l) + self.widths[l] * self.widths[l + 1];
        let n = self.widths[l + 1];
        &mut self.data[o..o + n]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Activations recorded by [`forward`] for the reverse pass.
#[derive(Clone, Debug)]
pub struct MlpTape<T> {
    batch: usize,
    input: Vec<T>,
    /// Per hidden layer: pre-activation `z` and normalized output `h`.
    pre: Vec<Vec<T>>,
    normed: Vec<Vec<T>>,
    inv_std: Vec<Vec<T>>,
    output: Vec<T>,
}

impl<T> MlpTape<T> {
    pub fn output(&self) -> &[T] {
        &self.output
    }

    pub fn batch(&self) -> usize {
        self.batch
    }
}

#[inline]
fn sigmoid<T: Scalar>(z: T) -> T {
    T::one() / (T::one() + (-z).exp())
}

fn affine<T: Scalar>(params: &MlpParams<T>, l: usize, batch: usize, input: &[T], out: &mut Vec<T>) {
    let (fan_in, fan_out) = (params.widths[l], params.widths[l + 1]);
    let bias = params.bias(l);
    out.clear();
    for _ in 0..batch {
        out.extend_from_slice(bias);
    }
    gemm(
        Trans::No,
        Trans::Yes,
        batch,
        fan_in,
        fan_out,
        T::one(),
        input,
        params.weight(l),
        T::one(),
        out,
    );
}

/// Batched forward pass on row-major `input` (`batch x in`).
pub fn forward<T: Scalar>(params: &MlpParams<T>, batch: usize, input: &[T]) -> MlpTape<T> {
    assert_eq!(input.len(), batch * params.input_dim(), "MLP input shape");
    let hidden = params.n_layers() - 1;
    let eps = T::lit(LAYER_NORM_EPS);
    let mut tape = MlpTape {
        batch,
        input: input.to_vec(),
        pre: Vec::with_capacity(hidden),
        normed: Vec::with_capacity(hidden),
        inv_std: Vec::with_capacity(hidden),
        output: Vec::new(),
    };
    for l in 0..hidden {
        let width = params.widths[l + 1];
        let mut z = Vec::new();
        affine(params, l, batch, layer_input(&tape, l), &mut z);
        let mut h: Vec<T> = z.iter().map(|&v| v * sigmoid(v)).collect();
        let mut inv = Vec::with_capacity(batch);
        let inv_n = T::one() / T::lit(width as f64);
        for row in h.chunks_mut(width) {
            let mean = row.iter().copied().sum::<T>() * inv_n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_n;
            let r = T::one() / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * r;
            }
            inv.push(r);
        }
        tape.pre.push(z);
        tape.normed.push(h);
        tape.inv_std.push(inv);
    }
    let mut out = Vec::new();
    affine(params, hidden, batch, layer_input(&tape, hidden), &mut out);
    tape.output = out;
    tape
}

fn layer_input<T>(tape: &MlpTape<T>, l: usize) -> &[T] {
    if l == 0 {
        &tape.input
    } else {
        &tape.normed[l - 1]
    }
}

/// Reverse pass: given `d_output` (`batch x out`) returns `d_input`, and
/// accumulates parameter gradients into `grads` when provided.
pub fn backward<T: Scalar>(
    params: &MlpParams<T>,
    tape: &MlpTape<T>,
    d_output: &[T],
    mut grads: Option<&mut MlpParams<T>>,
) -> Vec<T> {
    let batch = tape.batch;
    assert_eq!(
        d_output.len(),
        batch * params.output_dim(),
        "MLP cotangent shape"
    );
    let mut delta = d_output.to_vec();
    for l in (0..params.n_layers()).rev() {
        let (fan_in, fan_out) = (params.widths[l], params.widths[l + 1]);
        let input = layer_input(tape, l);
        if let Some(g) = grads.as_deref_mut() {
            gemm(
                Trans::Yes,
                Trans::No,
                fan_out,
                batch,
                fan_in,
                T::one(),
                &delta,
                input,
                T::one(),
                g.weight_mut(l),
            );
            let gb = g.bias_mut(l);
            for row in delta.chunks(fan_out) {
                for (b, &d) in gb.iter_mut().zip(row) {
                    *b += d;
                }
            }
        }
        let mut d_in = vec![T::zero(); batch * fan_in];
        gemm(
            Trans::No,
            Trans::No,
            batch,
            fan_out,
            fan_in,
            T::one(),
            &delta,
            params.weight(l),
            T::zero(),
            &mut d_in,
        );
        if l == 0 {
            return d_in;
        }
        // Through layer norm then SiLU of hidden layer l - 1.
        let h = &tape.normed[l - 1];
        let z = &tape.pre[l - 1];
        let inv = &tape.inv_std[l - 1];
        let inv_n = T::one() / T::lit(fan_in as f64);
        for (b, row) in d_in.chunks_mut(fan_in).enumerate() {
            let hrow = &h[b * fan_in..(b + 1) * fan_in];
            let zrow = &z[b * fan_in..(b + 1) * fan_in];
            let mean_d = row.iter().copied().sum::<T>() * inv_n;
            let mean_dh = row.iter().zip(hrow).map(|(&d, &hv)| d * hv).sum::<T>() * inv_n;
            for ((d, &hv), &zv) in row.iter_mut().zip(hrow).zip(zrow) {
                let da = inv[b] * (*d - mean_d - hv * mean_dh);
                let s = sigmoid(zv);
                *d = da * s * (T::one() + zv * (T::one() - s));
            }
        }
        delta = d_in;
    }
    unreachable!("the loop returns at layer 0")
}
