use sortlab::datagen::{gen_uniform, TokenSequence};
use sortlab::model::{init_model, loss_and_grad, BatchForward, ModelConfig, ModelParams};

fn toy(ln: bool, heads: usize) -> ModelConfig {
    ModelConfig {
        vocab_size: 12,
        d_model: 8,
        num_heads: heads,
        d_head: 4,
        list_length: 4,
        use_layer_norm: ln,
        init_std: Some(0.8),
        seed: 21,
    }
}

fn perturb_ln(p: &mut ModelParams) {
    // Non-trivial gains and biases so their gradients are exercised.
    let mut k = 0.0;
    for ln in [&mut p.ln_attn, &mut p.ln_final].into_iter().flatten() {
        for x in ln.gain.as_mut_slice() {
            k += 0.37;
            *x = 1.0 + 0.3 * (k as f64).sin();
        }
        for x in ln.bias.as_mut_slice() {
            k += 0.53;
            *x = 0.2 * (k as f64).cos();
        }
    }
}

/// Max over all parameters of |analytic − numeric| / max(|analytic|, |numeric|, floor).
fn max_relative_error(cfg: &ModelConfig) -> f64 {
    let mut p = init_model(cfg).unwrap();
    perturb_ln(&mut p);
    let data = gen_uniform(cfg.list_length, cfg.vocab_size, 5, 8).unwrap();
    let seqs = data.sequences().unwrap();
    let refs: Vec<&TokenSequence> = seqs.iter().collect();
    let (_, grad) = loss_and_grad(&p, &refs).unwrap();
    let analytic = grad.to_flat();
    let base = p.to_flat();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    let mut q = p.clone();
    for i in 0..base.len() {
        let mut w = base.clone();
        w[i] = base[i] + h;
        q.set_flat(&w).unwrap();
        let up = BatchForward::new(&q, &refs, &[]).unwrap().loss();
        w[i] = base[i] - h;
        q.set_flat(&w).unwrap();
        let down = BatchForward::new(&q, &refs, &[]).unwrap().loss();
        let numeric = (up - down) / (2.0 * h);
        let scale = analytic[i].abs().max(numeric.abs()).max(1e-4);
        worst = worst.max((analytic[i] - numeric).abs() / scale);
    }
    worst
}

#[test]
fn finite_differences_with_layernorm() {
    for heads in [1, 2] {
        let e = max_relative_error(&toy(true, heads));
        assert!(e < 1e-6, "heads {heads}: {e}");
    }
}

#[test]
fn finite_differences_without_layernorm() {
    for heads in [2, 3] {
        let e = max_relative_error(&toy(false, heads));
        assert!(e < 1e-6, "heads {heads}: {e}");
    }
}
