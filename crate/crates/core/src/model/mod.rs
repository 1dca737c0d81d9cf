//! One-layer attention-only transformer.
//!
//! Layout: token + learned positional embedding, optional layernorm, `H`
//! causal heads whose outputs are added back into the residual stream,
//! optional final layernorm, unembedding. No biases on projections.

mod checkpoint;
mod engine;
mod forward;

use serde::{Deserialize, Serialize};

use crate::numkernel::{Matrix, RandomSource};
use crate::{Error, Result};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, ParamIndexEntry};
pub use engine::{loss_and_grad, BatchForward, HeadOverride};
pub use forward::{forward, forward_with, ForwardCache};

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub num_heads: usize,
    pub d_head: usize,
    pub list_length: usize,
    pub use_layer_norm: bool,
    /// Standard deviation of the Gaussian initialisation; `None` means
    /// `1/sqrt(d_model)`.
    pub init_std: Option<f64>,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 52,
            d_model: 96,
            num_heads: 2,
            d_head: 48,
            list_length: 10,
            use_layer_norm: true,
            init_std: None,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn seq_len(&self) -> usize {
        2 * self.list_length + 1
    }

    pub fn effective_init_std(&self) -> f64 {
        self.init_std
            .unwrap_or_else(|| 1.0 / (self.d_model as f64).sqrt())
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 3 {
            return Err(Error::invalid("vocabulary needs at least 3 tokens"));
        }
        if self.list_length < 2 || self.list_length > self.vocab_size - 1 {
            return Err(Error::invalid(format!(
                "list length {} incompatible with vocabulary {}",
                self.list_length, self.vocab_size
            )));
        }
        if self.num_heads == 0 || self.d_model == 0 || self.d_head == 0 {
            return Err(Error::invalid("model dimensions must be positive"));
        }
        if let Some(s) = self.init_std {
            if !(s >= 0.0 && s.is_finite()) {
                return Err(Error::invalid(format!("bad init std {s}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadParams {
    /// `[d_model × d_head]`
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    /// `[d_head × d_model]`
    pub w_o: Matrix,
}

impl HeadParams {
    fn zeros(d_model: usize, d_head: usize) -> Self {
        Self {
            w_q: Matrix::zeros(d_model, d_head),
            w_k: Matrix::zeros(d_model, d_head),
            w_v: Matrix::zeros(d_model, d_head),
            w_o: Matrix::zeros(d_head, d_model),
        }
    }

    /// RMS over all four matrices of the head.
    pub fn rms(&self) -> f64 {
        let mats = [&self.w_q, &self.w_k, &self.w_v, &self.w_o];
        let n: usize = mats.iter().map(|m| m.len()).sum();
        let ss: f64 = mats.iter().map(|m| m.sum_sq()).sum();
        (ss / n as f64).sqrt()
    }
}

/// Gain and bias stored as `1 × d_model` rows.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerNormParams {
    pub gain: Matrix,
    pub bias: Matrix,
}

impl LayerNormParams {
    fn identity(d: usize) -> Self {
        Self {
            gain: Matrix::filled(1, d, 1.0),
            bias: Matrix::zeros(1, d),
        }
    }

    fn zeros(d: usize) -> Self {
        Self {
            gain: Matrix::zeros(1, d),
            bias: Matrix::zeros(1, d),
        }
    }
}

/// All weights of the model. The same structure doubles as the gradient
/// container.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    /// `W_E`, `[vocab × d_model]`
    pub embed: Matrix,
    /// `W_pos`, `[seq_len × d_model]`
    pub pos_embed: Matrix,
    pub ln_attn: Option<LayerNormParams>,
    pub heads: Vec<HeadParams>,
    pub ln_final: Option<LayerNormParams>,
    /// `W_U`, `[d_model × vocab]`
    pub unembed: Matrix,
}

impl ModelParams {
    pub fn zeros(config: &ModelConfig) -> Self {
        let d = config.d_model;
        let ln = config.use_layer_norm.then(|| LayerNormParams::zeros(d));
        Self {
            config: config.clone(),
            embed: Matrix::zeros(config.vocab_size, d),
            pos_embed: Matrix::zeros(config.seq_len(), d),
            ln_attn: ln.clone(),
            heads: (0..config.num_heads)
                .map(|_| HeadParams::zeros(d, config.d_head))
                .collect(),
            ln_final: ln,
            unembed: Matrix::zeros(d, config.vocab_size),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(&self.config)
    }

    pub fn num_heads(&self) -> usize {
        self.heads.len()
    }

    pub fn head(&self, h: usize) -> Result<&HeadParams> {
        self.heads.get(h).ok_or(Error::HeadOutOfRange {
            head: h,
            num_heads: self.heads.len(),
        })
    }

    /// Named tensors in a fixed canonical order.
    pub fn tensors(&self) -> Vec<(String, &Matrix)> {
        let mut out = vec![
            ("embed.W_E".to_string(), &self.embed),
            ("pos_embed.W_pos".to_string(), &self.pos_embed),
        ];
        if let Some(ln) = &self.ln_attn {
            out.push(("ln1.w".into(), &ln.gain));
            out.push(("ln1.b".into(), &ln.bias));
        }
        for (h, hp) in self.heads.iter().enumerate() {
            out.push((format!("attn.{h}.W_Q"), &hp.w_q));
            out.push((format!("attn.{h}.W_K"), &hp.w_k));
            out.push((format!("attn.{h}.W_V"), &hp.w_v));
            out.push((format!("attn.{h}.W_O"), &hp.w_o));
        }
        if let Some(ln) = &self.ln_final {
            out.push(("ln_final.w".into(), &ln.gain));
            out.push(("ln_final.b".into(), &ln.bias));
        }
        out.push(("unembed.W_U".into(), &self.unembed));
        out
    }

    /// Same order as [`ModelParams::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = vec![&mut self.embed, &mut self.pos_embed];
        if let Some(ln) = &mut self.ln_attn {
            out.push(&mut ln.gain);
            out.push(&mut ln.bias);
        }
        for hp in &mut self.heads {
            out.push(&mut hp.w_q);
            out.push(&mut hp.w_k);
            out.push(&mut hp.w_v);
            out.push(&mut hp.w_o);
        }
        if let Some(ln) = &mut self.ln_final {
            out.push(&mut ln.gain);
            out.push(&mut ln.bias);
        }
        out.push(&mut self.unembed);
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|(_, m)| m.len()).sum()
    }

    /// Flattened copy of every parameter in canonical order.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.parameter_count());
        for (_, m) in self.tensors() {
            v.extend_from_slice(m.as_slice());
        }
        v
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.parameter_count() {
            return Err(Error::invalid(format!(
                "flat vector has {} entries, model has {}",
                flat.len(),
                self.parameter_count()
            )));
        }
        let mut off = 0;
        for m in self.tensors_mut() {
            let n = m.len();
            m.as_mut_slice().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    /// `self += s * other`, tensor by tensor.
    pub fn add_scaled(&mut self, other: &ModelParams, s: f64) -> Result<()> {
        let theirs: Vec<&Matrix> = other.tensors().into_iter().map(|(_, m)| m).collect();
        let mine = self.tensors_mut();
        if mine.len() != theirs.len() {
            return Err(Error::invalid("parameter structures differ"));
        }
        for (a, b) in mine.into_iter().zip(theirs) {
            a.add_scaled(b, s)?;
        }
        Ok(())
    }

    /// Multiplies every weight (layernorm gains and biases included) by `c`.
    pub fn scale_all(&mut self, c: f64) {
        for m in self.tensors_mut() {
            m.scale(c);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, m)| m.is_finite())
    }

    pub fn ensure_finite(&self) -> Result<()> {
        for (name, m) in self.tensors() {
            m.ensure_finite(&name)?;
        }
        Ok(())
    }
}

/// Gaussian initialisation with layernorm gains 1 and biases 0.
pub fn init_model(config: &ModelConfig) -> Result<ModelParams> {
    config.validate()?;
    let mut params = ModelParams::zeros(config);
    let std = config.effective_init_std();
    let mut rng = RandomSource::new(config.seed);
    let names: Vec<String> = params.tensors().into_iter().map(|(n, _)| n).collect();
    for (name, m) in names.iter().zip(params.tensors_mut()) {
        if name.starts_with("ln") {
            continue;
        }
        for x in m.as_mut_slice() {
            *x = std * rng.normal();
        }
    }
    if let Some(ln) = &mut params.ln_attn {
        *ln = LayerNormParams::identity(config.d_model);
    }
    if let Some(ln) = &mut params.ln_final {
        *ln = LayerNormParams::identity(config.d_model);
    }
    Ok(params)
}
