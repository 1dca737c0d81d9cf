//! Token-basis OV and QK circuits, their numerical ranks and CSV export.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::model::ModelParams;
use crate::numkernel::Matrix;
use crate::{Error, Result};

/// Singular values below this fraction of the largest one do not count
/// towards a circuit's rank.
pub const DEFAULT_RANK_TOLERANCE: f64 = 1e-3;

/// `W_E W_V W_O W_U`, `[vocab × vocab]`. Row = attended (source) token,
/// column = output logit.
pub fn ov_circuit(params: &ModelParams, h: usize) -> Result<Matrix> {
    let hp = params.head(h)?;
    params.embed.matmul(&hp.w_v)?.matmul(&hp.w_o)?.matmul(&params.unembed)
}

/// `W_E W_Q W_Kᵀ W_Eᵀ`, `[vocab × vocab]`. Row = query token, column = key
/// token.
pub fn qk_circuit(params: &ModelParams, h: usize) -> Result<Matrix> {
    let hp = params.head(h)?;
    let q = params.embed.matmul(&hp.w_q)?;
    let k = params.embed.matmul(&hp.w_k)?;
    q.matmul_nt(&k)
}

/// Singular values in descending order (one-sided Jacobi).
pub fn singular_values(m: &Matrix) -> Vec<f64> {
    // Orthogonalise the shorter dimension: columns of `m`, held as rows.
    let mut cols = if m.cols() <= m.rows() { m.transpose() } else { m.clone() };
    let (n, len) = cols.shape();
    if n == 0 || len == 0 {
        return Vec::new();
    }
    let data = cols.as_mut_slice();
    const EPS: f64 = 1e-15;
    for _sweep in 0..80 {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let (head, tail) = data.split_at_mut(q * len);
                let up = &mut head[p * len..(p + 1) * len];
                let uq = &mut tail[..len];
                let mut alpha = 0.0;
                let mut beta = 0.0;
                let mut gamma = 0.0;
                for (a, b) in up.iter().zip(uq.iter()) {
                    alpha += a * a;
                    beta += b * b;
                    gamma += a * b;
                }
                if gamma == 0.0 || gamma.abs() <= EPS * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for (a, b) in up.iter_mut().zip(uq.iter_mut()) {
                    let (x, y) = (*a, *b);
                    *a = c * x - s * y;
                    *b = s * x + c * y;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let mut sv: Vec<f64> = data
        .chunks_exact(len)
        .map(|c| c.iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    sv
}

/// Number of singular values strictly above `tolerance · σ_max`.
pub fn numerical_rank(m: &Matrix, tolerance: f64) -> usize {
    let sv = singular_values(m);
    let Some(&top) = sv.first() else { return 0 };
    if top == 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > tolerance * top).count()
}

fn check_tolerance(tolerance: f64) -> Result<()> {
    if tolerance > 0.0 && tolerance < 1.0 {
        Ok(())
    } else {
        Err(Error::invalid(format!("rank tolerance {tolerance} not in (0, 1)")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadCircuits {
    pub ov: Matrix,
    pub qk: Matrix,
    pub ov_rank: usize,
    pub qk_rank: usize,
}

/// OV and QK circuits of every head with their ranks.
#[derive(Clone, Debug, PartialEq)]
pub struct CircuitSet {
    pub heads: Vec<HeadCircuits>,
    pub tolerance: f64,
}

impl CircuitSet {
    pub fn compute(params: &ModelParams, tolerance: f64) -> Result<Self> {
        check_tolerance(tolerance)?;
        let heads = (0..params.num_heads())
            .map(|h| {
                let ov = ov_circuit(params, h)?;
                let qk = qk_circuit(params, h)?;
                Ok(HeadCircuits {
                    ov_rank: numerical_rank(&ov, tolerance),
                    qk_rank: numerical_rank(&qk, tolerance),
                    ov,
                    qk,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { heads, tolerance })
    }

    pub fn total_rank(&self) -> usize {
        self.heads.iter().map(|h| h.ov_rank + h.qk_rank).sum()
    }

    pub fn vocab_size(&self) -> usize {
        self.heads.first().map_or(0, |h| h.ov.rows())
    }

    pub fn summary(&self) -> CircuitSummary {
        CircuitSummary {
            tolerance: self.tolerance,
            total_rank: self.total_rank(),
            heads: self
                .heads
                .iter()
                .enumerate()
                .map(|(h, c)| {
                    let diag = c.ov.diagonal();
                    HeadCircuitSummary {
                        head: h,
                        ov_rank: c.ov_rank,
                        qk_rank: c.qk_rank,
                        ov_frobenius: c.ov.frobenius_norm(),
                        qk_frobenius: c.qk.frobenius_norm(),
                        ov_diag_positive: diag.iter().filter(|&&x| x > 0.0).count(),
                        ov_diag_negative: diag.iter().filter(|&&x| x < 0.0).count(),
                    }
                })
                .collect(),
        }
    }
}

/// Sum of OV and QK ranks over all heads.
pub fn circuit_rank(params: &ModelParams, tolerance: f64) -> Result<usize> {
    Ok(CircuitSet::compute(params, tolerance)?.total_rank())
}

/// Cosine similarity of two matrices viewed as flat vectors; 0 if either is
/// zero.
pub fn cosine_similarity(a: &Matrix, b: &Matrix) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::DimensionMismatch {
            op: "cosine similarity",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let dot: f64 = a.as_slice().iter().zip(b.as_slice()).map(|(x, y)| x * y).sum();
    let n = a.frobenius_norm() * b.frobenius_norm();
    Ok(if n == 0.0 { 0.0 } else { dot / n })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadCircuitSummary {
    pub head: usize,
    pub ov_rank: usize,
    pub qk_rank: usize,
    pub ov_frobenius: f64,
    pub qk_frobenius: f64,
    pub ov_diag_positive: usize,
    pub ov_diag_negative: usize,
}

/// Contents of `circuits.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CircuitSummary {
    pub tolerance: f64,
    pub total_rank: usize,
    pub heads: Vec<HeadCircuitSummary>,
}

/// Writes one CSV line per matrix row; values use the shortest
/// representation that parses back to the same `f64`.
pub fn export_heatmap(m: &Matrix, path: &Path) -> Result<()> {
    let mut out = Vec::with_capacity(m.len() * 12);
    for r in 0..m.rows() {
        for (c, x) in m.row(r).iter().enumerate() {
            if c > 0 {
                out.push(b',');
            }
            write!(out, "{x}").expect("write to Vec");
        }
        out.push(b'\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_heatmap(path: &Path) -> Result<Matrix> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let rows: Vec<Vec<f64>> = text
        .lines()
        .filter(|l| !l.is_empty())
        .map(|l| {
            l.split(',')
                .map(|f| {
                    f.trim()
                        .parse::<f64>()
                        .map_err(|e| Error::invalid(format!("{}: {e}", path.display())))
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    if rows.iter().any(|r| r.len() != rows[0].len()) {
        return Err(Error::invalid(format!("{}: ragged heatmap", path.display())));
    }
    Ok(Matrix::from_rows(&rows))
}
