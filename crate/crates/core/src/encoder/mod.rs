//! Transformer encoder over fixed-length windows with pluggable positional
//! information, producing per-timestep hidden states and a mean-pooled
//! window embedding.

mod positional;

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AttentionSpec, AutodiffError, Graph, Init, NodeId, ParamId, ParamStore, Real, Tensor};

pub use positional::{alibi_bias, alibi_slope, rope_rotate, sinusoidal_pe, PositionalMode};

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("invalid encoder configuration: {0}")]
    Config(String),
    #[error("encoder input is empty")]
    EmptyInput,
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub ffn_dim: usize,
    pub dropout_rate: f64,
    pub positional_mode: PositionalMode,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_heads: 4,
            n_layers: 2,
            ffn_dim: 128,
            dropout_rate: 0.1,
            positional_mode: PositionalMode::Sinusoidal,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<(), EncoderError> {
        let err = |m: String| Err(EncoderError::Config(m));
        if self.d_model == 0 || self.n_heads == 0 || self.n_layers == 0 || self.ffn_dim == 0 {
            return err("dimensions must be positive".into());
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return err(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.positional_mode == PositionalMode::Rope && !(self.d_model / self.n_heads).is_multiple_of(2) {
            return err(format!(
                "rope needs an even head dimension, got {}",
                self.d_model / self.n_heads
            ));
        }
        if self.positional_mode == PositionalMode::Sinusoidal && !self.d_model.is_multiple_of(2) {
            return err(format!(
                "sinusoidal encoding needs an even d_model, got {}",
                self.d_model
            ));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return err(format!("dropout rate {} outside [0, 1)", self.dropout_rate));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

#[derive(Clone, Debug)]
struct LayerParams {
    ln1: (ParamId, ParamId),
    qkv: (ParamId, ParamId),
    out: (ParamId, ParamId),
    ln2: (ParamId, ParamId),
    ffn_in: (ParamId, ParamId),
    ffn_out: (ParamId, ParamId),
}

/// Pre-norm Transformer encoder. Parameters live in an external [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Encoder {
    config: EncoderConfig,
    input_dim: usize,
    input: (ParamId, ParamId),
    layers: Vec<LayerParams>,
    final_ln: (ParamId, ParamId),
}

fn linear_params<T: Real, R: Rng + ?Sized>(
    store: &mut ParamStore<T>,
    name: &str,
    rows: usize,
    cols: usize,
    rng: &mut R,
) -> (ParamId, ParamId) {
    (
        store.add_init(format!("{name}.weight"), rows, cols, Init::XavierUniform, rng),
        store.add_init(format!("{name}.bias"), 1, cols, Init::Zeros, rng),
    )
}

fn norm_params<T: Real, R: Rng + ?Sized>(
    store: &mut ParamStore<T>,
    name: &str,
    cols: usize,
    rng: &mut R,
) -> (ParamId, ParamId) {
    (
        store.add_init(format!("{name}.gamma"), 1, cols, Init::Ones, rng),
        store.add_init(format!("{name}.beta"), 1, cols, Init::Zeros, rng),
    )
}

impl Encoder {
    pub fn new<T: Real, R: Rng + ?Sized>(
        config: EncoderConfig,
        input_dim: usize,
        store: &mut ParamStore<T>,
        rng: &mut R,
    ) -> Result<Self, EncoderError> {
        config.validate()?;
        if input_dim == 0 {
            return Err(EncoderError::Config("input_dim must be positive".into()));
        }
        let d = config.d_model;
        let input = linear_params(store, "encoder.input", input_dim, d, rng);
        let layers = (0..config.n_layers)
            .map(|i| {
                let p = format!("encoder.layer{i}");
                LayerParams {
                    ln1: norm_params(store, &format!("{p}.ln1"), d, rng),
                    qkv: linear_params(store, &format!("{p}.qkv"), d, 3 * d, rng),
                    out: linear_params(store, &format!("{p}.attn_out"), d, d, rng),
                    ln2: norm_params(store, &format!("{p}.ln2"), d, rng),
                    ffn_in: linear_params(store, &format!("{p}.ffn_in"), d, config.ffn_dim, rng),
                    ffn_out: linear_params(store, &format!("{p}.ffn_out"), config.ffn_dim, d, rng),
                }
            })
            .collect();
        let final_ln = norm_params(store, "encoder.final_ln", d, rng);
        Ok(Self {
            config,
            input_dim,
            input,
            layers,
            final_ln,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    /// Hidden states `[batch·seq_len, d_model]` for `x` of shape
    /// `[batch·seq_len, input_dim]`. Dropout is active only when `dropout`
    /// carries a random stream.
    pub fn forward<T: Real, R: Rng + ?Sized>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: NodeId,
        seq_len: usize,
        mut dropout: Option<&mut R>,
    ) -> Result<NodeId, EncoderError> {
        let shape = g.shape(x);
        if seq_len == 0 || shape.0 == 0 {
            return Err(EncoderError::EmptyInput);
        }
        if shape.1 != self.input_dim || !shape.0.is_multiple_of(seq_len) {
            return Err(EncoderError::Config(format!(
                "input {shape} does not match input_dim {} with seq_len {seq_len}",
                self.input_dim
            )));
        }
        let batch = shape.0 / seq_len;
        let cfg = &self.config;
        let mut h = linear(g, store, x, self.input)?;
        if cfg.positional_mode == PositionalMode::Sinusoidal {
            let pe = sinusoidal_pe(seq_len, cfg.d_model)?;
            let mut tiled = Vec::with_capacity(shape.0 * cfg.d_model);
            for _ in 0..batch {
                tiled.extend(pe.data().iter().map(|&v| T::lit(v)));
            }
            h = g.add_const(h, &Tensor::from_vec(shape.0, cfg.d_model, tiled))?;
        }
        let bias = match cfg.positional_mode {
            PositionalMode::Alibi => {
                let b = alibi_bias(seq_len, cfg.n_heads)?;
                Some(Arc::new(Tensor::from_f64(b.rows(), b.cols(), b.data())))
            }
            _ => None,
        };
        let layout = AttentionSpec {
            heads: cfg.n_heads,
            seq_len,
            rope: cfg.positional_mode == PositionalMode::Rope,
            bias,
        };
        for layer in &self.layers {
            let n1 = norm(g, store, h, layer.ln1)?;
            let qkv = linear(g, store, n1, layer.qkv)?;
            let att = g.attention(qkv, &layout)?;
            let mut o = linear(g, store, att, layer.out)?;
            o = apply_dropout(g, o, cfg.dropout_rate, dropout.as_deref_mut())?;
            h = g.add(h, o)?;

            let n2 = norm(g, store, h, layer.ln2)?;
            let f = linear(g, store, n2, layer.ffn_in)?;
            let f = g.gelu(f);
            let mut f = linear(g, store, f, layer.ffn_out)?;
            f = apply_dropout(g, f, cfg.dropout_rate, dropout.as_deref_mut())?;
            h = g.add(h, f)?;
        }
        Ok(norm(g, store, h, self.final_ln)?)
    }

    /// Mean-pooled window embeddings `[batch, d_model]`.
    pub fn embed<T: Real, R: Rng + ?Sized>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: NodeId,
        seq_len: usize,
        dropout: Option<&mut R>,
    ) -> Result<NodeId, EncoderError> {
        let h = self.forward(g, store, x, seq_len, dropout)?;
        mean_pool(g, h, seq_len)
    }
}

/// Arithmetic mean over each window's time axis.
pub fn mean_pool<T: Real>(g: &mut Graph<T>, hidden: NodeId, seq_len: usize) -> Result<NodeId, EncoderError> {
    if seq_len == 0 || g.shape(hidden).0 == 0 {
        return Err(EncoderError::EmptyInput);
    }
    Ok(g.mean_pool(hidden, seq_len)?)
}

fn linear<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    x: NodeId,
    (w, b): (ParamId, ParamId),
) -> Result<NodeId, AutodiffError> {
    let w = g.param(store, w);
    let b = g.param(store, b);
    g.linear(x, w, b)
}

fn norm<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    x: NodeId,
    (gamma, beta): (ParamId, ParamId),
) -> Result<NodeId, AutodiffError> {
    let gamma = g.param(store, gamma);
    let beta = g.param(store, beta);
    g.layer_norm(x, gamma, beta)
}

fn apply_dropout<T: Real, R: Rng + ?Sized>(
    g: &mut Graph<T>,
    x: NodeId,
    rate: f64,
    rng: Option<&mut R>,
) -> Result<NodeId, AutodiffError> {
    let Some(rng) = rng else { return Ok(x) };
    if rate <= 0.0 {
        return Ok(x);
    }
    let keep = T::lit(1.0 / (1.0 - rate));
    let n = g.value(x).len();
    let mask = (0..n)
        .map(|_| if rng.random::<f64>() < rate { T::zero() } else { keep })
        .collect();
    g.mul_const(x, mask)
}
