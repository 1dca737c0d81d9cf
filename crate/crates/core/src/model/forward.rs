use super::engine::{check_overrides, HeadOverride};
use super::{ModelParams, LN_EPS};
use crate::numkernel::ops::{layernorm_into, softmax_in_place};
use crate::numkernel::Matrix;
use crate::{Error, Result};

/// Activations of one full-sequence forward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    /// Token + positional embedding, `[seq_len × d_model]`.
    pub resid_pre: Matrix,
    /// Input to the heads (after layernorm when enabled).
    pub attn_input: Matrix,
    /// Per head, `[seq_len × seq_len]`, row = query, zero above the diagonal.
    pub patterns: Vec<Matrix>,
    /// Per head, output after `W_O`, `[seq_len × d_model]`.
    pub head_outputs: Vec<Matrix>,
    pub resid_post: Matrix,
    pub logits: Matrix,
}

pub(crate) fn check_tokens(params: &ModelParams, tokens: &[usize]) -> Result<()> {
    let cfg = &params.config;
    if tokens.len() != cfg.seq_len() {
        return Err(Error::invalid(format!(
            "sequence has {} tokens, model expects {}",
            tokens.len(),
            cfg.seq_len()
        )));
    }
    if let Some(&t) = tokens.iter().find(|&&t| t >= cfg.vocab_size) {
        return Err(Error::TokenOutOfRange {
            token: t,
            vocab: cfg.vocab_size,
        });
    }
    Ok(())
}

/// Logits `[seq_len × vocab]` for one token sequence.
pub fn forward(params: &ModelParams, tokens: &[usize]) -> Result<(Matrix, ForwardCache)> {
    forward_with(params, tokens, &[])
}

/// [`forward`] with some heads' outputs replaced by fixed rows.
pub fn forward_with(
    params: &ModelParams,
    tokens: &[usize],
    overrides: &[HeadOverride],
) -> Result<(Matrix, ForwardCache)> {
    check_tokens(params, tokens)?;
    let cfg = &params.config;
    let (s, d) = (cfg.seq_len(), cfg.d_model);
    check_overrides(params, overrides)?;

    let mut resid_pre = Matrix::zeros(s, d);
    for (p, &t) in tokens.iter().enumerate() {
        let row = resid_pre.row_mut(p);
        for ((x, e), q) in row.iter_mut().zip(params.embed.row(t)).zip(params.pos_embed.row(p)) {
            *x = e + q;
        }
    }
    let attn_input = match &params.ln_attn {
        Some(ln) => {
            let mut out = Matrix::zeros(s, d);
            for p in 0..s {
                layernorm_into(
                    resid_pre.row(p),
                    ln.gain.as_slice(),
                    ln.bias.as_slice(),
                    LN_EPS,
                    out.row_mut(p),
                );
            }
            out
        }
        None => resid_pre.clone(),
    };

    let scale = 1.0 / (cfg.d_head as f64).sqrt();
    let mut resid_post = resid_pre.clone();
    let mut patterns = Vec::with_capacity(params.num_heads());
    let mut head_outputs = Vec::with_capacity(params.num_heads());
    for (h, hp) in params.heads.iter().enumerate() {
        let q = attn_input.matmul(&hp.w_q)?;
        let k = attn_input.matmul(&hp.w_k)?;
        let v = attn_input.matmul(&hp.w_v)?;
        let mut pattern = q.matmul_nt(&k)?;
        for i in 0..s {
            let row = pattern.row_mut(i);
            for (j, x) in row.iter_mut().enumerate() {
                *x = if j <= i { *x * scale } else { f64::NEG_INFINITY };
            }
            softmax_in_place(row);
        }
        let out = match overrides.iter().find(|o| o.head == h) {
            Some(o) => o.output.clone(),
            _ => pattern.matmul(&v)?.matmul(&hp.w_o)?,
        };
        resid_post.add_scaled(&out, 1.0)?;
        patterns.push(pattern);
        head_outputs.push(out);
    }

    let final_input = match &params.ln_final {
        Some(ln) => {
            let mut out = Matrix::zeros(s, d);
            for p in 0..s {
                layernorm_into(
                    resid_post.row(p),
                    ln.gain.as_slice(),
                    ln.bias.as_slice(),
                    LN_EPS,
                    out.row_mut(p),
                );
            }
            out
        }
        None => resid_post.clone(),
    };
    let logits = final_input.matmul(&params.unembed)?;
    Ok((
        logits.clone(),
        ForwardCache {
            resid_pre,
            attn_input,
            patterns,
            head_outputs,
            resid_post,
            logits,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{encode, gen_uniform, SortList};
    use crate::model::{init_model, ModelConfig};
    use crate::numkernel::{cross_entropy_masked, RandomSource};

    fn small_config(ln: bool) -> ModelConfig {
        ModelConfig {
            vocab_size: 12,
            d_model: 8,
            num_heads: 2,
            d_head: 4,
            list_length: 4,
            use_layer_norm: ln,
            init_std: Some(0.5),
            seed: 3,
        }
    }

    #[test]
    fn baseline_logit_shape() {
        let p = init_model(&ModelConfig::default()).unwrap();
        let s = encode(&SortList::new((0..10).rev().collect()).unwrap(), 52).unwrap();
        let (logits, cache) = forward(&p, &s.tokens).unwrap();
        assert_eq!(logits.shape(), (21, 52));
        assert_eq!(cache.patterns[0].shape(), (21, 21));
    }

    #[test]
    fn zero_weights_give_uniform_logits() {
        let cfg = ModelConfig {
            init_std: Some(0.0),
            ..Default::default()
        };
        let p = init_model(&cfg).unwrap();
        let s = encode(&SortList::new(vec![8, 3, 5, 1, 40, 22, 9, 0, 13, 50]).unwrap(), 52).unwrap();
        let (logits, _) = forward(&p, &s.tokens).unwrap();
        for r in 0..logits.rows() {
            assert!(logits.row(r).iter().all(|&x| x == logits[(r, 0)]));
        }
        let loss = cross_entropy_masked(&logits, &s.next_tokens(), &s.loss_mask).unwrap();
        assert!((loss - 52f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn bad_tokens_are_rejected() {
        let p = init_model(&small_config(true)).unwrap();
        assert!(matches!(
            forward(&p, &[0, 1, 2, 3, 11, 0, 1, 2, 12]),
            Err(Error::TokenOutOfRange { token: 12, .. })
        ));
        assert!(forward(&p, &[0, 1, 2]).is_err());
    }

    #[test]
    fn attention_rows_are_causal_distributions() {
        for ln in [true, false] {
            let p = init_model(&small_config(ln)).unwrap();
            let d = gen_uniform(4, 12, 3, 1).unwrap();
            for seq in d.sequences().unwrap() {
                let (_, cache) = forward(&p, &seq.tokens).unwrap();
                for pat in &cache.patterns {
                    for i in 0..pat.rows() {
                        let sum: f64 = pat.row(i)[..=i].iter().sum();
                        assert!((sum - 1.0).abs() < 1e-12);
                        assert!(pat.row(i)[i + 1..].iter().all(|&x| x == 0.0));
                    }
                }
            }
        }
    }

    #[test]
    fn perturbing_a_token_never_changes_earlier_logits() {
        let p = init_model(&small_config(true)).unwrap();
        let base: Vec<usize> = vec![3, 7, 1, 9, 11, 1, 3, 7, 9];
        let (ref_logits, _) = forward(&p, &base).unwrap();
        for pos in 0..base.len() {
            for tok in 0..12 {
                let mut t = base.clone();
                t[pos] = tok;
                let (l, _) = forward(&p, &t).unwrap();
                for r in 0..pos {
                    assert_eq!(l.row(r), ref_logits.row(r), "pos {pos} tok {tok} row {r}");
                }
            }
        }
    }

    #[test]
    fn scaling_weights_without_layernorm_scales_circuit_terms_quadratically() {
        let p = init_model(&small_config(false)).unwrap();
        let c = 1.7;
        let mut scaled = p.clone();
        scaled.scale_all(c);
        let tokens = [2, 5, 1, 8, 11, 1, 2, 5, 8];
        let (_, a) = forward(&p, &tokens).unwrap();
        let hp = &p.heads[0];
        let shp = &scaled.heads[0];
        // Raw (pre-scale) QK logits: x W_Q W_Kᵀ xᵀ with x the embedding sum.
        let qk = |x: &Matrix, hp: &crate::model::HeadParams| {
            x.matmul(&hp.w_q).unwrap().matmul_nt(&x.matmul(&hp.w_k).unwrap()).unwrap()
        };
        let (_, b) = forward(&scaled, &tokens).unwrap();
        // Same residual input: the W_Q W_Kᵀ pair contributes c².
        let lhs = qk(&a.resid_pre, shp);
        let rhs = qk(&a.resid_pre, hp);
        for (x, y) in lhs.as_slice().iter().zip(rhs.as_slice()) {
            assert!((x - c * c * y).abs() < 1e-9 * (1.0 + y.abs()));
        }
        // Scaled embeddings as well: c⁴ in total.
        let full = qk(&b.resid_pre, shp);
        for (x, y) in full.as_slice().iter().zip(rhs.as_slice()) {
            assert!((x - c.powi(4) * y).abs() < 1e-9 * (1.0 + y.abs()));
        }
        let ov = |hp: &crate::model::HeadParams| hp.w_v.matmul(&hp.w_o).unwrap();
        let (ov_a, ov_b) = (ov(hp), ov(shp));
        for (x, y) in ov_b.as_slice().iter().zip(ov_a.as_slice()) {
            assert!((x - c * c * y).abs() < 1e-12 * (1.0 + y.abs()));
        }
    }

    #[test]
    fn random_sequences_produce_finite_logits() {
        let p = init_model(&small_config(true)).unwrap();
        let mut rng = RandomSource::new(4);
        for _ in 0..20 {
            let tokens: Vec<usize> = (0..9).map(|_| rng.below_usize(12)).collect();
            let (l, _) = forward(&p, &tokens).unwrap();
            assert!(l.is_finite());
        }
    }
}
