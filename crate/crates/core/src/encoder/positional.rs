//! Positional information for the encoder: an additive sinusoidal table,
//! rotary query/key rotations and linear distance biases.

use serde::{Deserialize, Serialize};

use super::EncoderError;
use crate::autodiff::{rope_in_place, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PositionalMode {
    #[default]
    Sinusoidal,
    Rope,
    Alibi,
}

impl PositionalMode {
    pub const ALL: [PositionalMode; 3] = [Self::Sinusoidal, Self::Rope, Self::Alibi];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Sinusoidal => "sinusoidal",
            Self::Rope => "rope",
            Self::Alibi => "alibi",
        }
    }
}

impl std::fmt::Display for PositionalMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for PositionalMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sinusoidal" => Ok(Self::Sinusoidal),
            "rope" => Ok(Self::Rope),
            "alibi" => Ok(Self::Alibi),
            other => Err(format!("unknown positional mode `{other}`")),
        }
    }
}

/// `pe[pos, 2i] = sin(pos / 10000^(2i/d))`, `pe[pos, 2i+1] = cos(·)`.
pub fn sinusoidal_pe(len: usize, d_model: usize) -> Result<Tensor<f64>, EncoderError> {
    if !d_model.is_multiple_of(2) {
        return Err(EncoderError::Config(format!(
            "sinusoidal encoding needs an even d_model, got {d_model}"
        )));
    }
    let mut data = Vec::with_capacity(len * d_model);
    for pos in 0..len {
        for i in 0..d_model / 2 {
            let angle = pos as f64 / 10000f64.powf(2.0 * i as f64 / d_model as f64);
            data.push(angle.sin());
            data.push(angle.cos());
        }
    }
    Ok(Tensor::from_vec(len, d_model, data))
}

/// Rotary rotation of one query or key vector at token position `pos`.
pub fn rope_rotate(v: &[f64], pos: usize) -> Result<Vec<f64>, EncoderError> {
    if !v.len().is_multiple_of(2) {
        return Err(EncoderError::Config(format!(
            "rotary embedding needs an even head dimension, got {}",
            v.len()
        )));
    }
    let mut out = v.to_vec();
    rope_in_place(&mut out, pos, false);
    Ok(out)
}

/// Slope of head `h` (1-based): `2^(−8h / n_heads)`.
pub fn alibi_slope(h: usize, n_heads: usize) -> f64 {
    2f64.powf(-8.0 * h as f64 / n_heads as f64)
}

/// Symmetric distance penalty `−slope_h · |i − j|`, laid out `[n_heads·len, len]`.
pub fn alibi_bias(len: usize, n_heads: usize) -> Result<Tensor<f64>, EncoderError> {
    if n_heads == 0 {
        return Err(EncoderError::Config("ALiBi needs at least one head".into()));
    }
    let mut data = Vec::with_capacity(n_heads * len * len);
    for h in 1..=n_heads {
        let slope = alibi_slope(h, n_heads);
        for i in 0..len {
            for j in 0..len {
                data.push(-slope * i.abs_diff(j) as f64);
            }
        }
    }
    Ok(Tensor::from_vec(n_heads * len, len, data))
}
