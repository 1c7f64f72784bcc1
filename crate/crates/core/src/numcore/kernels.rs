//! Raw slice kernels shared by forward and backward rules.

use super::Real;

/// `out += a[n x k] * b[k x m]`.
pub fn gemm<S: Real>(a: &[S], b: &[S], out: &mut [S], n: usize, k: usize, m: usize) {
    debug_assert_eq!(a.len(), n * k);
    debug_assert_eq!(b.len(), k * m);
    debug_assert_eq!(out.len(), n * m);
    for i in 0..n {
        let orow = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == S::zero() {
                continue;
            }
            let brow = &b[p * m..(p + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
}

/// `out += a[n x k] * b[m x k]^T`.
pub fn gemm_nt<S: Real>(a: &[S], b: &[S], out: &mut [S], n: usize, k: usize, m: usize) {
    debug_assert_eq!(a.len(), n * k);
    debug_assert_eq!(b.len(), m * k);
    for i in 0..n {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..m {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = S::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                acc += x * y;
            }
            out[i * m + j] += acc;
        }
    }
}

/// `out += a[k x n]^T * b[k x m]`.
pub fn gemm_tn<S: Real>(a: &[S], b: &[S], out: &mut [S], n: usize, k: usize, m: usize) {
    debug_assert_eq!(a.len(), k * n);
    debug_assert_eq!(b.len(), k * m);
    for p in 0..k {
        let arow = &a[p * n..(p + 1) * n];
        let brow = &b[p * m..(p + 1) * m];
        for (i, &api) in arow.iter().enumerate() {
            if api == S::zero() {
                continue;
            }
            let orow = &mut out[i * m..(i + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += api * bv;
            }
        }
    }
}

/// Numerically stable softmax of one row, written into `out`.
pub(crate) fn softmax_row<S: Real>(x: &[S], out: &mut [S]) {
    let max = x.iter().fold(S::neg_infinity(), |m, &v| m.max(v));
    let mut sum = S::zero();
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (v - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Log-sum-exp of one row.
pub(crate) fn logsumexp<S: Real>(x: &[S]) -> S {
    let max = x.iter().fold(S::neg_infinity(), |m, &v| m.max(v));
    let sum: S = x.iter().map(|&v| (v - max).exp()).sum();
    max + sum.ln()
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub(crate) fn gelu<S: Real>(x: S) -> S {
    let c = S::of(GELU_C);
    let a = S::of(GELU_A);
    let t = (c * (x + a * x * x * x)).tanh();
    S::of(0.5) * x * (S::one() + t)
}

pub(crate) fn gelu_grad<S: Real>(x: S) -> S {
    let c = S::of(GELU_C);
    let a = S::of(GELU_A);
    let t = (c * (x + a * x * x * x)).tanh();
    let half = S::of(0.5);
    half * (S::one() + t) + half * x * (S::one() - t * t) * c * (S::one() + S::of(3.0) * a * x * x)
}

pub(crate) fn sigmoid<S: Real>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}
