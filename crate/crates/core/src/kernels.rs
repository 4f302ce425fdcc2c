//! Shared numeric kernels.
//!
//! Every computation that exists both on the autodiff graph and in the
//! graph-free incremental decoder goes through these functions, so the two
//! paths produce bit-identical values.

/// Additive mask for disallowed attention positions. Large enough that
/// exp(mask - max) underflows to exactly 0, yet still finite.
pub(crate) const CAUSAL_MASK_VALUE: f64 = -1.0e30;

/// C[m,n] = A[m,k] · B[k,n], row-major.
pub(crate) fn matmul_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] += aip * brow[j];
            }
        }
    }
    c
}

/// C[m,n] = A[m,k] · B[n,k]ᵀ, row-major. Each entry is a row-row dot product.
pub(crate) fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            c[i * n + j] = dot(arow, &b[j * k..(j + 1) * k]);
        }
    }
    c
}

/// C[q,r] = X[p,q]ᵀ · Y[p,r], row-major.
pub(crate) fn matmul_tn(x: &[f64], y: &[f64], p: usize, q: usize, r: usize) -> Vec<f64> {
    let mut c = vec![0.0; q * r];
    for t in 0..p {
        let xrow = &x[t * q..(t + 1) * q];
        let yrow = &y[t * r..(t + 1) * r];
        for i in 0..q {
            let xti = xrow[i];
            let crow = &mut c[i * r..(i + 1) * r];
            for j in 0..r {
                crow[j] += xti * yrow[j];
            }
        }
    }
    c
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut s = 0.0;
    for i in 0..a.len() {
        s += a[i] * b[i];
    }
    s
}

pub(crate) fn logsumexp(row: &[f64]) -> f64 {
    let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for &v in row {
        s += (v - mx).exp();
    }
    mx + s.ln()
}

/// Softmax with max subtraction, written into `out`.
pub(crate) fn softmax_row(row: &[f64], out: &mut [f64]) {
    let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for (o, &v) in out.iter_mut().zip(row) {
        let e = (v - mx).exp();
        *o = e;
        s += e;
    }
    for o in out.iter_mut() {
        *o /= s;
    }
}

/// log softmax(row)[idx], numerically stable.
pub(crate) fn log_prob_at(row: &[f64], idx: usize) -> f64 {
    row[idx] - logsumexp(row)
}

/// 1 / sqrt(mean(x²) + eps) over one row.
pub(crate) fn rms_inv(x: &[f64], eps: f64) -> f64 {
    let mut s = 0.0;
    for &v in x {
        s += v * v;
    }
    1.0 / (s / x.len() as f64 + eps).sqrt()
}

pub(crate) fn rmsnorm_row(x: &[f64], gain: &[f64], eps: f64, out: &mut [f64]) {
    let inv = rms_inv(x, eps);
    for i in 0..x.len() {
        out[i] = gain[i] * x[i] * inv;
    }
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
pub(crate) fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

/// Recursive pairwise summation. Exact for groups of 2^k equal values, and
/// more accurate than sequential folds in general.
pub(crate) fn pairwise_sum(xs: &[f64]) -> f64 {
    match xs.len() {
        0 => 0.0,
        1 => xs[0],
        2 => xs[0] + xs[1],
        n => {
            let mid = n / 2;
            pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
        }
    }
}
