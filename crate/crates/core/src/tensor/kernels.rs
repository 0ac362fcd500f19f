//! Raw loops behind the tape primitives. Reductions run in fixed
//! row-major order so repeated runs are bit-identical.

use super::Real;

/// `out[m×n] += a[m×k] · b[k×n]`
pub(crate) fn gemm_acc<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m×k] += dy[m×n] · bᵀ` where `b` is `k×n`.
pub(crate) fn gemm_acc_bt<T: Real>(dy: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    let bt = transpose(b, k, n);
    gemm_acc(dy, &bt, out, m, n, k);
}

/// `out[k×n] += aᵀ · dy` where `a` is `m×k` and `dy` is `m×n`.
pub(crate) fn gemm_acc_at<T: Real>(a: &[T], dy: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let dyrow = &dy[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &g) in orow.iter_mut().zip(dyrow) {
                *o += av * g;
            }
        }
    }
}

pub(crate) fn transpose<T: Real>(src: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = src[r * cols + c];
        }
    }
    out
}

/// Per-row LayerNorm with a two-pass mean/variance. Returns (y, xhat, rstd).
pub(crate) fn layer_norm<T: Real>(
    x: &[T],
    gamma: &[T],
    beta: &[T],
    width: usize,
    eps: T,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let rows = x.len() / width;
    let inv_w = T::one() / T::lit(width as f64);
    let mut y = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    let mut rstd = vec![T::zero(); rows];
    for r in 0..rows {
        let row = &x[r * width..(r + 1) * width];
        let mut mean = T::zero();
        for &v in row {
            mean += v;
        }
        mean *= inv_w;
        let mut var = T::zero();
        for &v in row {
            let d = v - mean;
            var += d * d;
        }
        var *= inv_w;
        let rs = T::one() / (var + eps).sqrt();
        rstd[r] = rs;
        for c in 0..width {
            let h = (row[c] - mean) * rs;
            xhat[r * width + c] = h;
            y[r * width + c] = h * gamma[c] + beta[c];
        }
    }
    (y, xhat, rstd)
}

pub(crate) fn gelu<T: Real>(x: T) -> T {
    let half = T::lit(0.5);
    half * x * (T::one() + (x * T::lit(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

pub(crate) fn gelu_grad<T: Real>(x: T) -> T {
    let cdf = T::lit(0.5) * (T::one() + (x * T::lit(std::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = (-(x * x) * T::lit(0.5)).exp() * T::lit(0.398_942_280_401_432_7);
    cdf + x * pdf
}

pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Max-subtracted softmax over rows of length `width`.
pub(crate) fn softmax_rows<T: Real>(x: &[T], width: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for (row, orow) in x.chunks(width).zip(out.chunks_mut(width)) {
        let mut max = T::neg_infinity();
        for &v in row {
            if v > max {
                max = v;
            }
        }
        let mut sum = T::zero();
        for (o, &v) in orow.iter_mut().zip(row) {
            *o = (v - max).exp();
            sum += *o;
        }
        let inv = T::one() / sum;
        for o in orow.iter_mut() {
            *o *= inv;
        }
    }
    out
}
