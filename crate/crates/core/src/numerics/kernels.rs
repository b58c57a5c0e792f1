//! Forward kernels shared by the gradient tape and by gradient-free code
//! (target generation, diagnostics, feature extraction).

use log::warn;

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// `op(a) · op(b)` where `op` optionally transposes a rank-2 operand.
pub fn matmul(a: &Tensor, b: &Tensor, ta: bool, tb: bool) -> Result<Tensor> {
    let (ar, ac) = a.dims2("matmul")?;
    let (br, bc) = b.dims2("matmul")?;
    let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
    let (k2, n) = if tb { (bc, br) } else { (br, bc) };
    if k != k2 {
        return Err(Error::shape(
            "matmul",
            format!("inner extents differ: {:?} x {:?}", a.shape(), b.shape()),
        ));
    }
    let mut out = vec![0.0; m * n];
    gemm(a.data(), b.data(), &mut out, m, k, n, ta, tb, 0.0);
    Tensor::matrix(m, n, out)
}

/// `c = op(a)·op(b) + beta·c` on raw row-major buffers.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    a: &[f64],
    b: &[f64],
    c: &mut [f64],
    m: usize,
    k: usize,
    n: usize,
    ta: bool,
    tb: bool,
    beta: f64,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|x| *x *= beta);
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the buffers have exactly the extents implied by the strides,
    // checked by the debug assertions above and by every caller's shape logic.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[inline]
pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    x.map(sigmoid_scalar)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

/// Tanh approximation of GELU.
#[inline]
pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

#[inline]
pub(crate) fn gelu_grad_scalar(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// Numerically stable `log(1 + exp(x))`.
#[inline]
pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub(crate) fn softmax_rows_inplace(data: &mut [f64], cols: usize) {
    for row in data.chunks_mut(cols) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for x in row.iter_mut() {
            *x = (*x - max).exp();
            sum += *x;
        }
        for x in row.iter_mut() {
            *x /= sum;
        }
    }
}

/// Softmax along `axis` (0 or 1) of a rank-2 tensor, or along the only axis of a vector.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    match (x.shape().len(), axis) {
        (1, 0) | (2, 1) => {
            let mut out = x.clone();
            let c = x.cols();
            softmax_rows_inplace(out.data_mut(), c);
            Ok(out)
        }
        (2, 0) => {
            let mut t = x.transpose()?;
            let c = t.cols();
            softmax_rows_inplace(t.data_mut(), c);
            t.transpose()
        }
        _ => Err(Error::shape(
            "softmax",
            format!("axis {axis} of shape {:?}", x.shape()),
        )),
    }
}

/// Per-row layer normalization. Returns `(y, xhat, rstd)`.
pub(crate) fn layer_norm_rows(
    x: &[f64],
    cols: usize,
    gamma: &[f64],
    beta: &[f64],
    eps: f64,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let rows = x.len() / cols;
    let mut y = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    let mut rstd = vec![0.0; rows];
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let mean = row.iter().sum::<f64>() / cols as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
        let rs = 1.0 / (var + eps).sqrt();
        rstd[r] = rs;
        for j in 0..cols {
            let h = (row[j] - mean) * rs;
            xhat[r * cols + j] = h;
            y[r * cols + j] = h * gamma[j] + beta[j];
        }
    }
    (y, xhat, rstd)
}

/// Layer normalization over the last axis with affine `gamma`/`beta`.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    if eps <= 0.0 {
        return Err(Error::Param(format!("layer_norm eps must be > 0, got {eps}")));
    }
    let d = x.cols();
    if d == 0 || gamma.numel() != d || beta.numel() != d {
        return Err(Error::shape(
            "layer_norm",
            format!("x {:?}, gamma {:?}, beta {:?}", x.shape(), gamma.shape(), beta.shape()),
        ));
    }
    let (y, _, _) = layer_norm_rows(x.data(), d, gamma.data(), beta.data(), eps);
    Tensor::new(x.shape().to_vec(), y)
}

/// Row-wise L2 normalization. Zero rows stay zero. Returns `(y, norms)`.
pub(crate) fn l2_normalize_rows(x: &[f64], cols: usize) -> (Vec<f64>, Vec<f64>) {
    let mut y = x.to_vec();
    let mut norms = Vec::with_capacity(x.len() / cols.max(1));
    let mut degenerate = 0usize;
    for row in y.chunks_mut(cols) {
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        norms.push(n);
        if n > 0.0 {
            row.iter_mut().for_each(|v| *v /= n);
        } else {
            degenerate += 1;
        }
    }
    if degenerate > 0 {
        warn!("l2_normalize: {degenerate} zero row(s) left as zero vectors");
    }
    (y, norms)
}

/// L2 normalization along the last axis; all-zero rows map to zero rows.
pub fn l2_normalize(x: &Tensor) -> Tensor {
    let (y, _) = l2_normalize_rows(x.data(), x.cols());
    Tensor::new(x.shape().to_vec(), y).expect("shape preserved")
}

/// Mean squared error between two equally shaped tensors.
pub fn mse(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape("mse", format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let s: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(s / a.numel().max(1) as f64)
}
