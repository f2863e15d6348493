//! Floating-point scalar abstraction shared by every numerical module.
//!
//! All math in this crate is written against [`Scalar`] so that the same code
//! runs in `f64` (the default, see [`crate::F64`] aliases) or `f32` for quick
//! experiments. The trait bundles `num_traits::Float` with the compound
//! assignment operators and a dense matrix-multiply hook that dispatches to
//! `matrixmultiply` for the primitive types.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FloatConst, FromPrimitive, ToPrimitive};

pub trait Scalar:
    Float
    + FloatConst
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Converts an `f64` literal. Never fails for the primitive floats.
    fn lit(x: f64) -> Self;

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    /// `c <- alpha * op(a) * op(b) + beta * c` on strided storage.
    ///
    /// `a` is `m x k`, `b` is `k x n`, `c` is `m x n`, with element `(i, j)`
    /// of each matrix at `i * row_stride + j * col_stride`.
    #[allow(clippy::too_many_arguments)]
    fn gemm_strided(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        a_strides: (isize, isize),
        b: &[Self],
        b_strides: (isize, isize),
        beta: Self,
        c: &mut [Self],
        c_strides: (isize, isize),
    );
}

fn span(rows: usize, cols: usize, (rs, cs): (isize, isize)) -> usize {
    if rows == 0 || cols == 0 {
        return 0;
    }
    (rows - 1) * rs.unsigned_abs() + (cols - 1) * cs.unsigned_abs() + 1
}

fn check_spans<T>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    a_strides: (isize, isize),
    b: &[T],
    b_strides: (isize, isize),
    c: &[T],
    c_strides: (isize, isize),
) {
    assert!(
        a_strides.0 >= 0 && a_strides.1 >= 0 && b_strides.0 >= 0 && b_strides.1 >= 0,
        "negative strides are not supported"
    );
    assert!(c_strides.0 >= 0 && c_strides.1 >= 0);
    assert!(span(m, k, a_strides) <= a.len(), "gemm: lhs too short");
    assert!(span(k, n, b_strides) <= b.len(), "gemm: rhs too short");
    assert!(span(m, n, c_strides) <= c.len(), "gemm: output too short");
}

macro_rules! impl_scalar {
    ($t:ty, $gemm:path) => {
        impl Scalar for $t {
            #[inline]
            fn lit(x: f64) -> Self {
                x as $t
            }

            fn gemm_strided(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                a_strides: (isize, isize),
                b: &[Self],
                b_strides: (isize, isize),
                beta: Self,
                c: &mut [Self],
                c_strides: (isize, isize),
            ) {
                check_spans(m, k, n, a, a_strides, b, b_strides, c, c_strides);
                if m == 0 || n == 0 {
                    return;
                }
                // SAFETY: every index touched is bounded by the spans checked above.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        a_strides.0,
                        a_strides.1,
                        b.as_ptr(),
                        b_strides.0,
                        b_strides.1,
                        beta,
                        c.as_mut_ptr(),
                        c_strides.0,
                        c_strides.1,
                    );
                }
            }
        }
    };
}

impl_scalar!(f64, matrixmultiply::dgemm);
impl_scalar!(f32, matrixmultiply::sgemm);

/// Which operand of a row-major product is read transposed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Trans {
    No,
    Yes,
}

/// Row-major `c <- alpha * op(a) * op(b) + beta * c`.
///
/// `op(a)` is `m x k` and `op(b)` is `k x n`; the stored shapes are the
/// transposes when the corresponding flag is [`Trans::Yes`].
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Scalar>(
    ta: Trans,
    tb: Trans,
    m: usize,
    k: usize,
    n: usize,
    alpha: T,
    a: &[T],
    b: &[T],
    beta: T,
    c: &mut [T],
) {
    if m < 4 {
        gemm_small(ta, tb, m, k, n, alpha, a, b, beta, c);
        return;
    }
    let a_strides = match ta {
        Trans::No => (k as isize, 1),
        Trans::Yes => (1, m as isize),
    };
    let b_strides = match tb {
        Trans::No => (n as isize, 1),
        Trans::Yes => (1, k as isize),
    };
    T::gemm_strided(
        m,
        k,
        n,
        alpha,
        a,
        a_strides,
        b,
        b_strides,
        beta,
        c,
        (n as isize, 1),
    );
}

/// Few-row products (single samples, tiny batches) where packing the
/// right-hand side would cost as much as the multiply itself.
#[allow(clippy::too_many_arguments)]
fn gemm_small<T: Scalar>(
    ta: Trans,
    tb: Trans,
    m: usize,
    k: usize,
    n: usize,
    alpha: T,
    a: &[T],
    b: &[T],
    beta: T,
    c: &mut [T],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let a_at = |i: usize, l: usize| match ta {
        Trans::No => a[i * k + l],
        Trans::Yes => a[l * m + i],
    };
    for i in 0..m {
        let row = &mut c[i * n..(i + 1) * n];
        if beta == T::zero() {
            row.iter_mut().for_each(|v| *v = T::zero());
        } else if beta != T::one() {
            row.iter_mut().for_each(|v| *v *= beta);
        }
        match tb {
            Trans::No => {
                for l in 0..k {
                    let s = alpha * a_at(i, l);
                    for (cv, &bv) in row.iter_mut().zip(&b[l * n..(l + 1) * n]) {
                        *cv += s * bv;
                    }
                }
            }
            Trans::Yes => {
                for (j, cv) in row.iter_mut().enumerate() {
                    let brow = &b[j * k..(j + 1) * k];
                    let mut acc = T::zero();
                    for (l, &bv) in brow.iter().enumerate() {
                        acc += a_at(i, l) * bv;
                    }
                    *cv += alpha * acc;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for l in 0..k {
                    c[i * n + j] += a[i * k + l] * b[l * n + j];
                }
            }
        }
        c
    }

    fn transpose(rows: usize, cols: usize, a: &[f64]) -> Vec<f64> {
        let mut t = vec![0.0; a.len()];
        for i in 0..rows {
            for j in 0..cols {
                t[j * rows + i] = a[i * cols + j];
            }
        }
        t
    }

    #[test]
    fn gemm_matches_naive_for_all_transpose_flags() {
        for (m, k, n) in [(3, 4, 5), (1, 7, 3), (9, 6, 5)] {
            let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
            let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.71).cos()).collect();
            let want = naive(m, k, n, &a, &b);
            let at = transpose(m, k, &a);
            let bt = transpose(k, n, &b);
            for (ta, tb, lhs, rhs) in [
                (Trans::No, Trans::No, &a, &b),
                (Trans::Yes, Trans::No, &at, &b),
                (Trans::No, Trans::Yes, &a, &bt),
                (Trans::Yes, Trans::Yes, &at, &bt),
            ] {
                let mut c = vec![1.0; m * n];
                gemm(ta, tb, m, k, n, 1.0, lhs, rhs, 0.0, &mut c);
                for (x, y) in c.iter().zip(&want) {
                    assert!((x - y).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn gemm_accumulates_with_beta() {
        let a = [1.0f32, 2.0];
        let b = [3.0f32, 4.0];
        let mut c = [10.0f32];
        gemm(Trans::No, Trans::No, 1, 2, 1, 2.0, &a, &b, 0.5, &mut c);
        assert_eq!(c[0], 2.0 * 11.0 + 5.0);
    }
}
