//! Dense kernels shared by the tape and by cached inference.
//!
//! Every kernel computes each output row from its input row alone, with a
//! fixed accumulation order. Row `i` of a batched call is therefore bit-equal
//! to a single-row call on the same input, which the incremental decoders and
//! the batched discriminator scoring rely on.

use crate::scalar::Scalar;

pub const LN_EPS: f64 = 1e-5;

/// `out[n,m] = a[n,k] · b[k,m]`.
pub fn matmul<S: Scalar>(a: &[S], b: &[S], n: usize, k: usize, m: usize) -> Vec<S> {
    let mut out = vec![S::zero(); n * m];
    for (a_row, o_row) in a.chunks_exact(k).zip(out.chunks_exact_mut(m)) {
        matvec_into(a_row, b, m, o_row);
    }
    out
}

/// `out[m] += x[k] · b[k,m]`, accumulated over k in ascending order.
#[inline]
pub fn matvec_into<S: Scalar>(x: &[S], b: &[S], m: usize, out: &mut [S]) {
    for (&xp, b_row) in x.iter().zip(b.chunks_exact(m)) {
        if xp == S::zero() {
            continue;
        }
        for (o, &bv) in out.iter_mut().zip(b_row) {
            *o += xp * bv;
        }
    }
}

/// `out[k,m] += a[n,k]ᵀ · b[n,m]`.
pub fn matmul_tn_acc<S: Scalar>(a: &[S], b: &[S], n: usize, k: usize, m: usize, out: &mut [S]) {
    for i in 0..n {
        let a_row = &a[i * k..(i + 1) * k];
        let b_row = &b[i * m..(i + 1) * m];
        for (&ap, o_row) in a_row.iter().zip(out.chunks_exact_mut(m)) {
            if ap == S::zero() {
                continue;
            }
            for (o, &bv) in o_row.iter_mut().zip(b_row) {
                *o += ap * bv;
            }
        }
    }
}

pub fn transpose<S: Scalar>(a: &[S], rows: usize, cols: usize) -> Vec<S> {
    let mut out = vec![S::zero(); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

#[inline]
pub fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    a.iter().zip(b).fold(S::zero(), |acc, (&x, &y)| acc + x * y)
}

/// In-place max-subtracted softmax.
pub fn softmax_in_place<S: Scalar>(x: &mut [S]) {
    let max = x.iter().copied().fold(S::neg_infinity(), S::max);
    let mut sum = S::zero();
    for v in x.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in x.iter_mut() {
        *v /= sum;
    }
}

/// Log-sum-exp of a row, max-shifted.
pub fn log_sum_exp<S: Scalar>(x: &[S]) -> S {
    let max = x.iter().copied().fold(S::neg_infinity(), S::max);
    let sum: S = x.iter().map(|&v| (v - max).exp()).sum();
    max + sum.ln()
}

/// Normalizes one row; returns `(mean, rstd)` for the backward pass.
pub fn layer_norm_row<S: Scalar>(x: &[S], gain: &[S], bias: &[S], out: &mut [S]) -> (S, S) {
    let d = S::of(x.len() as f64);
    let mean = x.iter().copied().sum::<S>() / d;
    let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / d;
    let rstd = S::one() / (var + S::of(LN_EPS)).sqrt();
    for (((o, &v), &g), &b) in out.iter_mut().zip(x).zip(gain).zip(bias) {
        *o = (v - mean) * rstd * g + b;
    }
    (mean, rstd)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh approximation of GELU.
#[inline]
pub fn gelu<S: Scalar>(x: S) -> S {
    let c = S::of(GELU_C);
    let a = S::of(GELU_A);
    let half = S::of(0.5);
    half * x * (S::one() + (c * (x + a * x * x * x)).tanh())
}

#[inline]
pub fn gelu_grad<S: Scalar>(x: S) -> S {
    let c = S::of(GELU_C);
    let a = S::of(GELU_A);
    let half = S::of(0.5);
    let three = S::of(3.0);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (S::one() + t) + half * x * (S::one() - t * t) * c * (S::one() + three * a * x * x)
}

#[inline]
pub fn sigmoid<S: Scalar>(x: S) -> S {
    S::one() / (S::one() + (-x).exp())
}

/// Causal attention for one query row of one head.
///
/// `keys` and `values` hold `count` rows with stride `stride`, head slice
/// starting at `offset`, width `dh`. Writes attention weights into `probs`
/// (length `count`) and accumulates the weighted values into `out`.
#[allow(clippy::too_many_arguments)]
pub fn attend_row<S: Scalar>(
    q: &[S],
    keys: &[S],
    values: &[S],
    count: usize,
    stride: usize,
    offset: usize,
    scale: S,
    probs: &mut [S],
    out: &mut [S],
) {
    let dh = q.len();
    for j in 0..count {
        let k = &keys[j * stride + offset..j * stride + offset + dh];
        probs[j] = dot(q, k) * scale;
    }
    softmax_in_place(&mut probs[..count]);
    for j in 0..count {
        let p = probs[j];
        let v = &values[j * stride + offset..j * stride + offset + dh];
        for (o, &vv) in out.iter_mut().zip(v) {
            *o += p * vv;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_small() {
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        assert_eq!(matmul::<f64>(&a, &b, 2, 2, 2), vec![19.0, 22.0, 43.0, 50.0]);
        let mut out = vec![0.0; 4];
        matmul_tn_acc::<f64>(&a, &b, 2, 2, 2, &mut out);
        // aᵀ b
        assert_eq!(out, vec![26.0, 30.0, 38.0, 44.0]);
    }

    #[test]
    fn batched_rows_equal_single_rows() {
        let a: Vec<f32> = (0..12).map(|i| (i as f32 * 0.37).sin()).collect();
        let b: Vec<f32> = (0..20).map(|i| (i as f32 * 0.11).cos()).collect();
        let full = matmul(&a, &b, 3, 4, 5);
        for r in 0..3 {
            let single = matmul(&a[r * 4..(r + 1) * 4], &b, 1, 4, 5);
            assert_eq!(&full[r * 5..(r + 1) * 5], single.as_slice());
        }
    }

    #[test]
    fn gelu_grad_matches_difference() {
        for &x in &[-3.0f64, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }
}
