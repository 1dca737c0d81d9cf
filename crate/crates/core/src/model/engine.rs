//! Batched forward pass restricted to the prediction positions, with exact
//! reverse-mode gradients.
//!
//! Only the `ℓ` prediction positions `ℓ … 2ℓ−1` enter the loss, and in a
//! single attention layer their logits depend on keys `0 … 2ℓ−1` only. The
//! head inputs at position `p` depend on nothing but `(token, p)`, so the
//! embedding, first layernorm and Q/K/V projections are evaluated once per
//! `(token, position)` pair in a table of `vocab · 2ℓ` rows and gathered per
//! sequence. Gradients flow back through the same table.

use super::forward::check_tokens;
use super::{ModelParams, LN_EPS};
use crate::datagen::TokenSequence;
use crate::numkernel::ops::{
    argmax, layernorm_backward, layernorm_into, log_sum_exp, softmax_entropy, softmax_in_place,
    LayerNormStats,
};
use crate::numkernel::{gemm_acc, gemm_tn_acc, Matrix};
use crate::{Error, Result};

/// Replaces one head's post-`W_O` output by fixed per-position rows
/// (`[seq_len × d_model]`), e.g. its dataset mean for mean ablation.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadOverride {
    pub head: usize,
    pub output: Matrix,
}

impl HeadOverride {
    pub(crate) fn check(&self, params: &ModelParams) -> Result<()> {
        params.head(self.head)?;
        let want = (params.config.seq_len(), params.config.d_model);
        if self.output.shape() != want {
            return Err(Error::DimensionMismatch {
                op: "head override",
                left: self.output.shape(),
                right: want,
            });
        }
        Ok(())
    }
}

pub(crate) fn check_overrides(params: &ModelParams, overrides: &[HeadOverride]) -> Result<()> {
    for (i, o) in overrides.iter().enumerate() {
        o.check(params)?;
        if overrides[..i].iter().any(|p| p.head == o.head) {
            return Err(Error::invalid(format!("head {} overridden twice", o.head)));
        }
    }
    Ok(())
}

/// Dot product with eight interleaved partial sums (fixed order).
#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let tail: f64 = ca
        .remainder()
        .iter()
        .zip(cb.remainder())
        .map(|(x, y)| x * y)
        .sum();
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] = x[l].mul_add(y[l], acc[l]);
        }
    }
    acc.iter().sum::<f64>() + tail
}

#[inline]
fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// Forward activations for a batch, kept for the backward pass and for
/// per-position evaluation.
pub struct BatchForward<'a> {
    params: &'a ModelParams,
    ell: usize,
    /// Key positions per sequence, `2ℓ`.
    tk: usize,
    batch: usize,
    /// Tokens `0 … 2ℓ−1` of every sequence, row-major `[batch × tk]`.
    tokens: Vec<usize>,
    /// Next-token targets at the prediction positions, `[batch · ℓ]`.
    targets: Vec<usize>,
    x_tab: Matrix,
    n_tab: Matrix,
    ln1_stats: Vec<LayerNormStats>,
    q_tab: Vec<Matrix>,
    k_tab: Vec<Matrix>,
    v_tab: Vec<Matrix>,
    /// Value table already pushed through `W_O`, `[vocab · 2ℓ × d_model]`.
    vo_tab: Vec<Matrix>,
    /// Per head, `[batch · ℓ × tk]`; entries past the causal limit are 0.
    attn: Vec<Matrix>,
    resid: Matrix,
    final_in: Matrix,
    lnf_stats: Vec<LayerNormStats>,
    logits: Matrix,
    probs: Matrix,
    lse: Vec<f64>,
    overridden: Vec<usize>,
}

impl<'a> BatchForward<'a> {
    pub fn new(
        params: &'a ModelParams,
        seqs: &[&TokenSequence],
        overrides: &[HeadOverride],
    ) -> Result<Self> {
        if seqs.is_empty() {
            return Err(Error::Empty("batch has no sequences"));
        }
        let cfg = &params.config;
        let ell = cfg.list_length;
        let tk = 2 * ell;
        let (v, d) = (cfg.vocab_size, cfg.d_model);
        let batch = seqs.len();
        check_overrides(params, overrides)?;

        let mut tokens = Vec::with_capacity(batch * tk);
        let mut targets = Vec::with_capacity(batch * ell);
        for s in seqs {
            check_tokens(params, &s.tokens)?;
            tokens.extend_from_slice(&s.tokens[..tk]);
            targets.extend_from_slice(&s.tokens[ell + 1..=tk]);
        }
        let tab = |t: usize, p: usize| t * tk + p;

        // (token, position) table.
        let rows = v * tk;
        let mut x_tab = Matrix::zeros(rows, d);
        for t in 0..v {
            for p in 0..tk {
                let row = x_tab.row_mut(tab(t, p));
                for ((x, e), q) in row
                    .iter_mut()
                    .zip(params.embed.row(t))
                    .zip(params.pos_embed.row(p))
                {
                    *x = e + q;
                }
            }
        }
        let (n_tab, ln1_stats) = match &params.ln_attn {
            Some(ln) => {
                let mut out = Matrix::zeros(rows, d);
                let stats = (0..rows)
                    .map(|r| {
                        layernorm_into(
                            x_tab.row(r),
                            ln.gain.as_slice(),
                            ln.bias.as_slice(),
                            LN_EPS,
                            out.row_mut(r),
                        )
                    })
                    .collect();
                (out, stats)
            }
            None => (x_tab.clone(), Vec::new()),
        };

        let scale = 1.0 / (cfg.d_head as f64).sqrt();
        let nq = batch * ell;
        let mut q_tab = Vec::new();
        let mut k_tab = Vec::new();
        let mut v_tab = Vec::new();
        let mut vo_tab = Vec::new();
        let mut attn = Vec::new();
        let mut resid = Matrix::zeros(nq, d);
        for b in 0..batch {
            for j in 0..ell {
                let q = ell + j;
                resid
                    .row_mut(b * ell + j)
                    .copy_from_slice(x_tab.row(tab(tokens[b * tk + q], q)));
            }
        }

        for (h, hp) in params.heads.iter().enumerate() {
            let qt = n_tab.matmul(&hp.w_q)?;
            let kt = n_tab.matmul(&hp.w_k)?;
            let vt = n_tab.matmul(&hp.w_v)?;
            let vo = vt.matmul(&hp.w_o)?;
            let own = !overrides.iter().any(|o| o.head == h);
            let mut a = Matrix::zeros(nq, tk);
            for b in 0..batch {
                let toks = &tokens[b * tk..(b + 1) * tk];
                for j in 0..ell {
                    let q = ell + j;
                    let row = b * ell + j;
                    let qrow = qt.row(tab(toks[q], q));
                    let arow = &mut a.row_mut(row)[..=q];
                    for (k, s) in arow.iter_mut().enumerate() {
                        *s = dot(qrow, kt.row(tab(toks[k], k))) * scale;
                    }
                    softmax_in_place(arow);
                    if own {
                        let rrow = resid.row_mut(row);
                        for k in 0..=q {
                            axpy(rrow, a[(row, k)], vo.row(tab(toks[k], k)));
                        }
                    }
                }
            }
            if let Some(o) = overrides.iter().find(|o| o.head == h) {
                for b in 0..batch {
                    for j in 0..ell {
                        axpy(resid.row_mut(b * ell + j), 1.0, o.output.row(ell + j));
                    }
                }
            }
            q_tab.push(qt);
            k_tab.push(kt);
            v_tab.push(vt);
            vo_tab.push(vo);
            attn.push(a);
        }

        let (final_in, lnf_stats) = match &params.ln_final {
            Some(ln) => {
                let mut out = Matrix::zeros(nq, d);
                let stats = (0..nq)
                    .map(|r| {
                        layernorm_into(
                            resid.row(r),
                            ln.gain.as_slice(),
                            ln.bias.as_slice(),
                            LN_EPS,
                            out.row_mut(r),
                        )
                    })
                    .collect();
                (out, stats)
            }
            None => (resid.clone(), Vec::new()),
        };
        let logits = final_in.matmul(&params.unembed)?;
        let mut probs = logits.clone();
        let mut lse = Vec::with_capacity(nq);
        for r in 0..nq {
            lse.push(log_sum_exp(logits.row(r)));
            softmax_in_place(probs.row_mut(r));
        }

        Ok(Self {
            params,
            ell,
            tk,
            batch,
            tokens,
            targets,
            x_tab,
            n_tab,
            ln1_stats,
            q_tab,
            k_tab,
            v_tab,
            vo_tab,
            attn,
            resid,
            final_in,
            lnf_stats,
            logits,
            probs,
            lse,
            overridden: overrides.iter().map(|o| o.head).collect(),
        })
    }

    pub fn batch_size(&self) -> usize {
        self.batch
    }

    pub fn list_length(&self) -> usize {
        self.ell
    }

    /// Logits at the prediction positions, `[batch · ℓ × vocab]`; row
    /// `b·ℓ + j` is position `ℓ + j` of sequence `b`.
    pub fn logits(&self) -> &Matrix {
        &self.logits
    }

    pub fn targets(&self) -> &[usize] {
        &self.targets
    }

    /// Token at the query position of each prediction row.
    pub fn query_tokens(&self) -> Vec<usize> {
        (0..self.batch)
            .flat_map(|b| (0..self.ell).map(move |j| (b, j)))
            .map(|(b, j)| self.tokens[b * self.tk + self.ell + j])
            .collect()
    }

    /// Attention pattern of head `h` for prediction row `row` over key
    /// positions `0 … 2ℓ−1`.
    pub fn attention_row(&self, h: usize, row: usize) -> &[f64] {
        self.attn[h].row(row)
    }

    /// Post-`W_O` output of head `h` at the prediction positions,
    /// `[batch · ℓ × d_model]`, as computed by the head itself (overrides
    /// are ignored).
    pub fn head_output(&self, h: usize) -> Result<Matrix> {
        self.params.head(h)?;
        let d = self.params.config.d_model;
        let (ell, tk) = (self.ell, self.tk);
        let mut out = Matrix::zeros(self.batch * ell, d);
        for b in 0..self.batch {
            let toks = &self.tokens[b * tk..(b + 1) * tk];
            for j in 0..ell {
                let row = b * ell + j;
                let orow = out.row_mut(row);
                for k in 0..=ell + j {
                    axpy(orow, self.attn[h][(row, k)], self.vo_tab[h].row(toks[k] * tk + k));
                }
            }
        }
        Ok(out)
    }

    pub fn position_losses(&self) -> Vec<f64> {
        (0..self.logits.rows())
            .map(|r| {
                self.lse[r] - self.logits[(r, self.targets[r])]
            })
            .collect()
    }

    /// Mean masked cross-entropy over the batch.
    pub fn loss(&self) -> f64 {
        let l = self.position_losses();
        l.iter().sum::<f64>() / l.len() as f64
    }

    pub fn predictions(&self) -> Vec<usize> {
        (0..self.logits.rows())
            .map(|r| argmax(self.logits.row(r)))
            .collect()
    }

    pub fn correct_count(&self) -> usize {
        self.predictions()
            .iter()
            .zip(&self.targets)
            .filter(|(p, t)| p == t)
            .count()
    }

    pub fn entropies(&self) -> Vec<f64> {
        (0..self.logits.rows())
            .map(|r| softmax_entropy(self.logits.row(r)))
            .collect()
    }

    /// Gradient of [`BatchForward::loss`] with respect to every parameter.
    pub fn backward(&self) -> Result<ModelParams> {
        let params = self.params;
        let cfg = &params.config;
        let (ell, tk, batch) = (self.ell, self.tk, self.batch);
        let (d, dh) = (cfg.d_model, cfg.d_head);
        let nq = batch * ell;
        let tab = |t: usize, p: usize| t * tk + p;
        let mut grads = params.zeros_like();

        // Cross-entropy over the mean of nq positions.
        let mut dlogits = self.probs.clone();
        let inv_n = 1.0 / nq as f64;
        for r in 0..nq {
            let row = dlogits.row_mut(r);
            row[self.targets[r]] -= 1.0;
            row.iter_mut().for_each(|x| *x *= inv_n);
        }
        gemm_tn_acc(&mut grads.unembed, &self.final_in, &dlogits);
        let dfinal = dlogits.matmul_nt(&params.unembed)?;

        let dresid = match (&params.ln_final, &mut grads.ln_final) {
            (Some(ln), Some(gln)) => {
                let mut dr = Matrix::zeros(nq, d);
                for r in 0..nq {
                    layernorm_backward(
                        self.resid.row(r),
                        ln.gain.as_slice(),
                        self.lnf_stats[r],
                        dfinal.row(r),
                        dr.row_mut(r),
                        gln.gain.as_mut_slice(),
                        gln.bias.as_mut_slice(),
                    );
                }
                dr
            }
            _ => dfinal,
        };

        let rows = self.x_tab.rows();
        let mut dn_tab = Matrix::zeros(rows, d);
        let scale = 1.0 / (dh as f64).sqrt();
        for (h, hp) in params.heads.iter().enumerate() {
            if self.overridden.contains(&h) {
                continue;
            }
            let gh = &mut grads.heads[h];
            let (qt, kt, vt, a) = (&self.q_tab[h], &self.k_tab[h], &self.v_tab[h], &self.attn[h]);
            let vo = &self.vo_tab[h];
            let mut dq = Matrix::zeros(rows, dh);
            let mut dk = Matrix::zeros(rows, dh);
            // Attention-weighted sum of output gradients landing on each table row.
            let mut sink = Matrix::zeros(rows, d);
            let mut ds = vec![0.0; tk];
            for b in 0..batch {
                let toks = &self.tokens[b * tk..(b + 1) * tk];
                for j in 0..ell {
                    let q = ell + j;
                    let row = b * ell + j;
                    let drow = dresid.row(row);
                    let arow = a.row(row);
                    let mut weighted = 0.0;
                    for k in 0..=q {
                        let r = tab(toks[k], k);
                        let da = dot(drow, vo.row(r));
                        axpy(sink.row_mut(r), arow[k], drow);
                        ds[k] = da;
                        weighted += arow[k] * da;
                    }
                    let rq = tab(toks[q], q);
                    for k in 0..=q {
                        let g = arow[k] * (ds[k] - weighted) * scale;
                        if g == 0.0 {
                            continue;
                        }
                        let r = tab(toks[k], k);
                        axpy(dq.row_mut(rq), g, kt.row(r));
                        axpy(dk.row_mut(r), g, qt.row(rq));
                    }
                }
            }
            gemm_tn_acc(&mut gh.w_o, vt, &sink);
            let dv = sink.matmul_nt(&hp.w_o)?;
            gemm_tn_acc(&mut gh.w_q, &self.n_tab, &dq);
            gemm_tn_acc(&mut gh.w_k, &self.n_tab, &dk);
            gemm_tn_acc(&mut gh.w_v, &self.n_tab, &dv);
            gemm_acc(&mut dn_tab, &dq, &hp.w_q.transpose());
            gemm_acc(&mut dn_tab, &dk, &hp.w_k.transpose());
            gemm_acc(&mut dn_tab, &dv, &hp.w_v.transpose());
        }

        let mut dx_tab = match (&params.ln_attn, &mut grads.ln_attn) {
            (Some(ln), Some(gln)) => {
                let mut dx = Matrix::zeros(rows, d);
                for r in 0..rows {
                    layernorm_backward(
                        self.x_tab.row(r),
                        ln.gain.as_slice(),
                        self.ln1_stats[r],
                        dn_tab.row(r),
                        dx.row_mut(r),
                        gln.gain.as_mut_slice(),
                        gln.bias.as_mut_slice(),
                    );
                }
                dx
            }
            _ => dn_tab,
        };
        // Residual path from the prediction positions.
        for b in 0..batch {
            for j in 0..ell {
                let q = ell + j;
                let r = tab(self.tokens[b * tk + q], q);
                axpy(dx_tab.row_mut(r), 1.0, dresid.row(b * ell + j));
            }
        }
        for t in 0..cfg.vocab_size {
            for p in 0..tk {
                let src = dx_tab.row(tab(t, p));
                axpy(grads.embed.row_mut(t), 1.0, src);
                axpy(grads.pos_embed.row_mut(p), 1.0, src);
            }
        }
        Ok(grads)
    }
}

/// Mean loss and its gradient over `seqs`.
pub fn loss_and_grad(params: &ModelParams, seqs: &[&TokenSequence]) -> Result<(f64, ModelParams)> {
    let fwd = BatchForward::new(params, seqs, &[])?;
    Ok((fwd.loss(), fwd.backward()?))
}
