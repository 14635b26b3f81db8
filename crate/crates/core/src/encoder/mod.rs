//! Desk-scale transformer encoder with multiplicative gates on attention
//! heads and FFN intermediate neurons.
//!
//! Layers are post-norm residual blocks:
//!
//! ```text
//! y   = LN1(x + sum_i xi_i * (Attn_i(x) W_O^i + b_O^i))
//! out = LN2(y + (GELU(y W_1 + b_1) * nu) W_2 + b_2)
//! ```
//!
//! The sentence embedding is the final hidden state at the prepended CLS
//! position. [`Tape`] records forward passes and returns exact reverse-mode
//! gradients for every weight and every gate.

mod layers;
mod tape;
mod weights;

pub use layers::{gelu, masked_ffn, masked_mha};
pub use tape::{forward_embed, Dropout, Tape};
pub use weights::{
    AttentionWeights, EncoderWeights, FeedForwardWeights, GradientSet, LayerNorm, LayerWeights,
    MaskSet,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Mat;

/// One sentence representation per row.
pub type EmbeddingMatrix<T> = Mat<T>;

/// Token id of the classification token prepended to every sequence.
pub use crate::corpus::CLS_ID;

pub(crate) const LAYER_NORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    /// Including the CLS position.
    pub max_seq_len: usize,
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub heads_per_layer: usize,
    pub head_dim: usize,
    pub ffn_dim: usize,
    pub dropout_rate: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    /// The toy profile: small enough that a full sparsity sweep runs on one core.
    fn default() -> Self {
        ModelConfig {
            vocab_size: 2000,
            max_seq_len: 32,
            hidden_dim: 64,
            num_layers: 2,
            heads_per_layer: 4,
            head_dim: 16,
            ffn_dim: 256,
            dropout_rate: 0.1,
            seed: 42,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("hidden_dim", self.hidden_dim),
            ("num_layers", self.num_layers),
            ("heads_per_layer", self.heads_per_layer),
            ("head_dim", self.head_dim),
            ("ffn_dim", self.ffn_dim),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.hidden_dim != self.heads_per_layer * self.head_dim {
            return Err(Error::Config(format!(
                "hidden_dim {} != heads_per_layer {} x head_dim {}",
                self.hidden_dim, self.heads_per_layer, self.head_dim
            )));
        }
        if self.max_seq_len < 2 {
            return Err(Error::Config(
                "max_seq_len must be at least 2 (CLS plus one token)".into(),
            ));
        }
        if self.vocab_size <= crate::corpus::NUM_RESERVED as usize {
            return Err(Error::Config(
                "vocab_size must exceed the reserved token count".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!(
                "dropout_rate {} outside [0, 1)",
                self.dropout_rate
            )));
        }
        Ok(())
    }
}

/// Draw a fresh weight set from `config.seed`.
pub fn init_model<T: crate::tensor::Real>(config: &ModelConfig) -> Result<EncoderWeights<T>> {
    config.validate()?;
    Ok(EncoderWeights::init(config))
}
