//! Row-wise primitives shared by the model, its gradients and the analyses.

use super::Matrix;
use crate::{Error, Result};

/// Softmax of a single row in place, with max subtraction. `-inf` entries
/// become exactly 0; a row that is entirely `-inf` becomes all zeros.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        row.iter_mut().for_each(|x| *x = 0.0);
        return;
    }
    let mut sum = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    let inv = 1.0 / sum;
    row.iter_mut().for_each(|x| *x *= inv);
}

pub fn softmax_rows(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    for r in 0..out.rows() {
        softmax_in_place(out.row_mut(r));
    }
    out
}

/// `ln Σ exp(row)`, stable.
pub fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Shannon entropy (natural log) of the softmax of `logits`.
pub fn softmax_entropy(logits: &[f64]) -> f64 {
    let lse = log_sum_exp(logits);
    let mut h = 0.0;
    for &z in logits {
        let logp = z - lse;
        let p = logp.exp();
        if p > 0.0 {
            h -= p * logp;
        }
    }
    h.max(0.0)
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate().skip(1) {
        if x > row[best] {
            best = i;
        }
    }
    best
}

/// Per-vector statistics kept from a layernorm forward pass.
#[derive(Clone, Copy, Debug)]
pub struct LayerNormStats {
    pub mean: f64,
    pub inv_std: f64,
}

/// `(x − mean) / sqrt(var + eps) · gain + bias`, population variance.
pub fn layernorm(x: &[f64], gain: &[f64], bias: &[f64], eps: f64) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    layernorm_into(x, gain, bias, eps, &mut out);
    out
}

pub(crate) fn layernorm_into(
    x: &[f64],
    gain: &[f64],
    bias: &[f64],
    eps: f64,
    out: &mut [f64],
) -> LayerNormStats {
    debug_assert!(x.len() == gain.len() && x.len() == bias.len() && x.len() == out.len());
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv_std = 1.0 / (var + eps).sqrt();
    for i in 0..x.len() {
        out[i] = (x[i] - mean) * inv_std * gain[i] + bias[i];
    }
    LayerNormStats { mean, inv_std }
}

/// Backward of [`layernorm_into`]. Accumulates into `dx`, `dgain`, `dbias`.
pub(crate) fn layernorm_backward(
    x: &[f64],
    gain: &[f64],
    stats: LayerNormStats,
    dy: &[f64],
    dx: &mut [f64],
    dgain: &mut [f64],
    dbias: &mut [f64],
) {
    let n = x.len() as f64;
    let mut sum_g = 0.0;
    let mut sum_gx = 0.0;
    for i in 0..x.len() {
        let xhat = (x[i] - stats.mean) * stats.inv_std;
        let g = dy[i] * gain[i];
        dgain[i] += dy[i] * xhat;
        dbias[i] += dy[i];
        sum_g += g;
        sum_gx += g * xhat;
    }
    for i in 0..x.len() {
        let xhat = (x[i] - stats.mean) * stats.inv_std;
        let g = dy[i] * gain[i];
        dx[i] += stats.inv_std * (g - sum_g / n - xhat * sum_gx / n);
    }
}

/// Mean of `−ln softmax(logits[p])[targets[p]]` over positions with `mask[p]`.
pub fn cross_entropy_masked(logits: &Matrix, targets: &[usize], mask: &[bool]) -> Result<f64> {
    if targets.len() != logits.rows() || mask.len() != logits.rows() {
        return Err(Error::DimensionMismatch {
            op: "cross_entropy_masked",
            left: logits.shape(),
            right: (targets.len(), mask.len()),
        });
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for (p, (&t, &m)) in targets.iter().zip(mask).enumerate() {
        if !m {
            continue;
        }
        if t >= logits.cols() {
            return Err(Error::TokenOutOfRange {
                token: t,
                vocab: logits.cols(),
            });
        }
        let row = logits.row(p);
        total += log_sum_exp(row) - row[t];
        count += 1;
    }
    if count == 0 {
        return Err(Error::Empty("cross_entropy_masked: every position is masked out"));
    }
    Ok(total / count as f64)
}
