//! Dense kernels shared by the graph ops, plus the standalone
//! normalization and softmax routines.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `c = beta * c + op(a) * op(b)` for row-major operands, where `op(a)` is
/// `m×k` and `op(b)` is `k×n`. With `ta` set, `a` is stored as `k×m`;
/// likewise `tb` means `b` is stored as `n×k`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(ta: bool, tb: bool, m: usize, n: usize, k: usize, a: &[f64], b: &[f64], beta: f64, c: &mut [f64]) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above bound every index touched by the strides.
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

/// Patch matrix for a 3×3, padding-1 convolution: one row per output
/// position, columns ordered `(ky, kx, cin)`.
pub fn im2col(x: &[f64], h: usize, w: usize, cin: usize, stride: usize) -> Vec<f64> {
    let (ho, wo) = (h.div_ceil(stride), w.div_ceil(stride));
    let mut cols = vec![0.0; ho * wo * 9 * cin];
    for oy in 0..ho {
        for ox in 0..wo {
            let base = (oy * wo + ox) * 9 * cin;
            for ky in 0..3 {
                let iy = (oy * stride + ky) as isize - 1;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..3 {
                    let ix = (ox * stride + kx) as isize - 1;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let src = (iy as usize * w + ix as usize) * cin;
                    let dst = base + (ky * 3 + kx) * cin;
                    cols[dst..dst + cin].copy_from_slice(&x[src..src + cin]);
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-adds patch gradients back onto the map.
pub fn col2im_add(cols: &[f64], h: usize, w: usize, cin: usize, stride: usize, gx: &mut [f64]) {
    let (ho, wo) = (h.div_ceil(stride), w.div_ceil(stride));
    for oy in 0..ho {
        for ox in 0..wo {
            let base = (oy * wo + ox) * 9 * cin;
            for ky in 0..3 {
                let iy = (oy * stride + ky) as isize - 1;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..3 {
                    let ix = (ox * stride + kx) as isize - 1;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let dst = (iy as usize * w + ix as usize) * cin;
                    let src = base + (ky * 3 + kx) * cin;
                    for (g, c) in gx[dst..dst + cin].iter_mut().zip(&cols[src..src + cin]) {
                        *g += c;
                    }
                }
            }
        }
    }
}

/// Mean and population variance.
pub fn mean_var(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let mut n = 0usize;
    let mut sum = 0.0;
    for v in values.clone() {
        sum += v;
        n += 1;
    }
    let mean = sum / n as f64;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    (mean, var)
}

pub(crate) fn instance_norm_parts(data: &[f64], channels: usize, eps: f64) -> (Vec<f64>, Vec<f64>) {
    let mut xhat = vec![0.0; data.len()];
    let mut inv_std = vec![0.0; channels];
    for c in 0..channels {
        let column = data.iter().skip(c).step_by(channels).copied();
        let (mean, var) = mean_var(column);
        let is = 1.0 / (var + eps).sqrt();
        inv_std[c] = is;
        for j in (c..data.len()).step_by(channels) {
            xhat[j] = (data[j] - mean) * is;
        }
    }
    (xhat, inv_std)
}

pub(crate) fn instance_norm_backward(g: &[f64], xhat: &[f64], inv_std: &[f64], channels: usize, gx: &mut [f64]) {
    let n = (g.len() / channels) as f64;
    for (c, is) in inv_std.iter().enumerate() {
        let mut mean_g = 0.0;
        let mut mean_gx = 0.0;
        for j in (c..g.len()).step_by(channels) {
            mean_g += g[j];
            mean_gx += g[j] * xhat[j];
        }
        mean_g /= n;
        mean_gx /= n;
        for j in (c..g.len()).step_by(channels) {
            gx[j] += is * (g[j] - mean_g - xhat[j] * mean_gx);
        }
    }
}

/// Normalizes every channel of an `H×W×C` map to zero mean and unit
/// population variance over its spatial positions.
pub fn instance_norm(map: &Tensor, eps: f64) -> Tensor {
    let (xhat, _) = instance_norm_parts(map.data(), map.last_dim(), eps);
    Tensor::new(map.shape(), xhat).unwrap()
}

/// `softmax(scores / tau)`, computed with max subtraction.
pub fn softmax_scaled(scores: &[f64], tau: f64) -> Result<Vec<f64>> {
    if scores.is_empty() {
        return Err(Error::invalid("softmax", "empty score vector"));
    }
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::invalid("softmax", format!("temperature must be positive, got {tau}")));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite { op: "softmax" });
    }
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| ((s - max) / tau).exp()).collect();
    let z: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / z).collect())
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Sigmoid focal loss of one logit and its derivative.
pub fn focal_term(x: f64, positive: bool, alpha: f64, gamma: f64) -> (f64, f64) {
    let p = sigmoid(x);
    let q = sigmoid(-x);
    if positive {
        let log_p = -softplus(-x);
        let value = -alpha * q.powf(gamma) * log_p;
        let grad = alpha * gamma * q.powf(gamma) * p * log_p - alpha * q.powf(gamma + 1.0);
        (value, grad)
    } else {
        let log_q = -softplus(x);
        let value = -(1.0 - alpha) * p.powf(gamma) * log_q;
        let grad = -(1.0 - alpha) * (gamma * p.powf(gamma) * q * log_q - p.powf(gamma + 1.0));
        (value, grad)
    }
}

/// `-ln IoU` of two boxes given as `(l, t, r, b)` distances from a shared
/// anchor point, and its derivative with respect to the predicted side.
pub fn iou_term(pred: &[f64], target: &[f64]) -> (f64, [f64; 4]) {
    let (l, t, r, b) = (pred[0], pred[1], pred[2], pred[3]);
    let (gl, gt, gr, gb) = (target[0], target[1], target[2], target[3]);
    let area_p = (l + r) * (t + b);
    let area_g = (gl + gr) * (gt + gb);
    let wi = l.min(gl) + r.min(gr);
    let hi = t.min(gt) + b.min(gb);
    let inter = wi * hi;
    let union = area_p + area_g - inter;
    let value = union.ln() - inter.ln();

    let di = [
        if l < gl { hi } else { 0.0 },
        if t < gt { wi } else { 0.0 },
        if r < gr { hi } else { 0.0 },
        if b < gb { wi } else { 0.0 },
    ];
    let da = [t + b, l + r, t + b, l + r];
    let mut grad = [0.0; 4];
    for q in 0..4 {
        grad[q] = (da[q] - di[q]) / union - di[q] / inter;
    }
    (value, grad)
}
