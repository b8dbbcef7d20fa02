//! Forward kernels shared by the autodiff graph and the incremental decoder.
//!
//! Both paths call exactly these functions, which is what makes cached
//! inference bit-identical to full recomputation.

use super::tensor::Tensor;
use crate::scalar::Scalar;

pub const LN_EPS: f64 = 1e-5;

pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    assert_eq!(a.cols, b.rows, "matmul inner dimensions");
    let mut out = Tensor::zeros(a.rows, b.cols);
    T::gemm(
        a.rows,
        a.cols,
        b.cols,
        &a.data,
        (a.cols as isize, 1),
        &b.data,
        (b.cols as isize, 1),
        &mut out.data,
        b.cols,
        false,
    );
    out
}

/// `x·w + b` with `b` a `1×n` row broadcast over rows.
pub fn linear<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let mut y = matmul(x, w);
    add_row_bias(&mut y, b);
    y
}

pub fn add_row_bias<T: Scalar>(x: &mut Tensor<T>, b: &Tensor<T>) {
    assert_eq!(b.len(), x.cols, "bias width");
    for r in 0..x.rows {
        for (v, &bv) in x.row_mut(r).iter_mut().zip(&b.data) {
            *v = *v + bv;
        }
    }
}

/// Row-wise layer norm; returns the output plus per-row mean and reciprocal std.
pub fn layer_norm<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
) -> (Tensor<T>, Vec<T>, Vec<T>) {
    let n = T::from_usize_lossy(x.cols);
    let eps = T::lit(LN_EPS);
    let mut y = Tensor::zeros(x.rows, x.cols);
    let mut means = Vec::with_capacity(x.rows);
    let mut rstds = Vec::with_capacity(x.rows);
    for r in 0..x.rows {
        let row = x.row(r);
        let mean = row.iter().copied().sum::<T>() / n;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let rstd = T::one() / (var + eps).sqrt();
        for (c, out) in y.row_mut(r).iter_mut().enumerate() {
            *out = (row[c] - mean) * rstd * gamma.data[c] + beta.data[c];
        }
        means.push(mean);
        rstds.push(rstd);
    }
    (y, means, rstds)
}

const GELU_K: f64 = 0.044715;

/// Tanh-approximated GELU.
#[inline]
pub fn gelu<T: Scalar>(x: T) -> T {
    let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let half = T::lit(0.5);
    half * x * (T::one() + (c * (x + T::lit(GELU_K) * x * x * x)).tanh())
}

#[inline]
pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let half = T::lit(0.5);
    let k = T::lit(GELU_K);
    let t = (c * (x + k * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::lit(3.0) * k * x * x)
}

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Softmax over `row[..live]`; entries past `live` are set to zero.
pub fn softmax_prefix<T: Scalar>(row: &mut [T], live: usize) {
    let max = row[..live].iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row[..live].iter_mut() {
        *v = (*v - max).exp();
        sum = sum + *v;
    }
    let inv = T::one() / sum;
    row[..live].iter_mut().for_each(|v| *v = *v * inv);
    row[live..].iter_mut().for_each(|v| *v = T::zero());
}

/// Multi-head scaled dot-product attention.
///
/// `q: n×d`, `k, v: m×d`, heads split the columns. With `causal`, query row
/// `i` sees keys `0..=i`. Returns the `n×d` output and the per-head
/// probabilities (`heads × n × m`) needed for the backward pass.
pub fn attention<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    heads: usize,
    causal: bool,
) -> (Tensor<T>, Vec<T>) {
    let (n, d) = q.shape();
    let m = k.rows;
    assert_eq!(k.cols, d);
    assert_eq!(v.shape(), (m, d));
    assert!(d % heads == 0, "width not divisible by heads");
    assert!(!causal || n <= m, "causal attention needs n <= m");
    let dh = d / heads;
    let scale = T::one() / T::from_usize_lossy(dh).sqrt();
    let mut out = Tensor::zeros(n, d);
    let mut probs = vec![T::zero(); heads * n * m];
    for h in 0..heads {
        let p = &mut probs[h * n * m..(h + 1) * n * m];
        T::gemm(
            n,
            dh,
            m,
            &q.data[h * dh..],
            (d as isize, 1),
            &k.data[h * dh..],
            (1, d as isize),
            p,
            m,
            false,
        );
        for i in 0..n {
            let row = &mut p[i * m..(i + 1) * m];
            row.iter_mut().for_each(|s| *s = *s * scale);
            let live = if causal { i + 1 + (m - n) } else { m };
            softmax_prefix(row, live);
        }
        T::gemm(
            n,
            m,
            dh,
            p,
            (m as isize, 1),
            &v.data[h * dh..],
            (d as isize, 1),
            &mut out.data[h * dh..],
            d,
            false,
        );
    }
    (out, probs)
}

/// Gradients of [`attention`] given its saved probabilities.
#[allow(clippy::too_many_arguments)]
pub fn attention_backward<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    probs: &[T],
    heads: usize,
    dout: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (n, d) = q.shape();
    let m = k.rows;
    let dh = d / heads;
    let scale = T::one() / T::from_usize_lossy(dh).sqrt();
    let mut dq = Tensor::zeros(n, d);
    let mut dk = Tensor::zeros(m, d);
    let mut dv = Tensor::zeros(m, d);
    let mut ds = vec![T::zero(); n * m];
    for h in 0..heads {
        let p = &probs[h * n * m..(h + 1) * n * m];
        // dP = dO_h · V_hᵀ
        T::gemm(
            n,
            dh,
            m,
            &dout.data[h * dh..],
            (d as isize, 1),
            &v.data[h * dh..],
            (1, d as isize),
            &mut ds,
            m,
            false,
        );
        for i in 0..n {
            let pr = &p[i * m..(i + 1) * m];
            let dr = &mut ds[i * m..(i + 1) * m];
            let dot: T = pr.iter().zip(dr.iter()).map(|(&a, &b)| a * b).sum();
            for (g, &pv) in dr.iter_mut().zip(pr) {
                *g = pv * (*g - dot) * scale;
            }
        }
        T::gemm(
            n,
            m,
            dh,
            &ds,
            (m as isize, 1),
            &k.data[h * dh..],
            (d as isize, 1),
            &mut dq.data[h * dh..],
            d,
            false,
        );
        T::gemm(
            m,
            n,
            dh,
            &ds,
            (1, m as isize),
            &q.data[h * dh..],
            (d as isize, 1),
            &mut dk.data[h * dh..],
            d,
            false,
        );
        T::gemm(
            m,
            n,
            dh,
            p,
            (1, m as isize),
            &dout.data[h * dh..],
            (d as isize, 1),
            &mut dv.data[h * dh..],
            d,
            false,
        );
    }
    (dq, dk, dv)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_attention(q: &Tensor<f64>, k: &Tensor<f64>, v: &Tensor<f64>, heads: usize, causal: bool) -> Tensor<f64> {
        let (n, d) = q.shape();
        let m = k.rows;
        let dh = d / heads;
        let mut out = Tensor::zeros(n, d);
        for h in 0..heads {
            for i in 0..n {
                let live = if causal { i + 1 + m - n } else { m };
                let s: Vec<f64> = (0..live)
                    .map(|j| (0..dh).map(|c| q.at(i, h * dh + c) * k.at(j, h * dh + c)).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let mx = s.iter().cloned().fold(f64::MIN, f64::max);
                let z: f64 = s.iter().map(|x| (x - mx).exp()).sum();
                for c in 0..dh {
                    *out.at_mut(i, h * dh + c) = (0..live).map(|j| (s[j] - mx).exp() / z * v.at(j, h * dh + c)).sum();
                }
            }
        }
        out
    }

    #[test]
    fn attention_matches_naive() {
        let f = |r: usize, c: usize| ((r * 7 + c * 3) as f64 * 0.37).sin();
        let q = Tensor::from_fn(5, 8, f);
        let k = Tensor::from_fn(5, 8, |r, c| f(r + 11, c));
        let v = Tensor::from_fn(5, 8, |r, c| f(r + 23, c));
        for causal in [false, true] {
            let (out, _) = attention(&q, &k, &v, 2, causal);
            let want = naive_attention(&q, &k, &v, 2, causal);
            assert!(out.max_abs_diff(&want) < 1e-12);
        }
    }

    #[test]
    fn gelu_grad_matches_difference() {
        for &x in &[-3.0, -0.7, 0.0, 0.4, 2.5f64] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }
}
