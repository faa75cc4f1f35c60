//! Slice-level forward kernels shared by the autodiff graph and the cached
//! inference path.

use super::scalar::{gemm, MatMut, MatRef};
use super::Scalar;

pub const RMS_EPS: f64 = 1e-5;

/// `x[rows, k] * w[k, n]`.
pub fn matmul<T: Scalar>(x: &[T], rows: usize, k: usize, w: &[T], n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows * n];
    gemm(
        T::one(),
        MatRef::row_major(x, rows, k),
        MatRef::row_major(w, k, n),
        T::zero(),
        MatMut::row_major(&mut out, rows, n),
    );
    out
}

/// Row-wise RMS normalization with a learned gain. Returns the per-row
/// reciprocal RMS values used by the backward pass.
pub fn rms_norm<T: Scalar>(x: &[T], gain: &[T], out: &mut [T]) -> Vec<T> {
    let cols = gain.len();
    let eps = T::of(RMS_EPS);
    let n = T::of(cols as f64);
    let mut inv = Vec::with_capacity(x.len() / cols.max(1));
    for (xr, or) in x.chunks_exact(cols).zip(out.chunks_exact_mut(cols)) {
        let ms = xr.iter().map(|&v| v * v).sum::<T>() / n;
        let r = T::one() / (ms + eps).sqrt();
        for ((o, &v), &g) in or.iter_mut().zip(xr).zip(gain) {
            *o = v * r * g;
        }
        inv.push(r);
    }
    inv
}

pub fn sigmoid<T: Scalar>(v: T) -> T {
    T::one() / (T::one() + (-v).exp())
}

pub fn silu<T: Scalar>(v: T) -> T {
    v * sigmoid(v)
}

/// In-place numerically stable softmax of one row.
pub fn softmax_row<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v = *v / sum;
    }
}

/// `log(sum(exp(row)))`, stable.
pub fn log_sum_exp<T: Scalar>(row: &[T]) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let s: T = row.iter().map(|&v| (v - max).exp()).sum();
    max + s.ln()
}

pub fn add_assign<T: Scalar>(acc: &mut [T], v: &[T]) {
    for (a, &b) in acc.iter_mut().zip(v) {
        *a += b;
    }
}

pub fn all_finite<T: Scalar>(v: &[T]) -> bool {
    v.iter().all(|x| x.is_finite())
}
