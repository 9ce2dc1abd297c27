use crate::error::{Error, Result};
use crate::linalg::Precision;
use serde::{Deserialize, Serialize};

/// Micro decoder-only transformer configuration (pre-norm, SwiGLU FFN,
/// learned absolute positional embeddings, untied LM head, no biases).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    /// FFN hidden width as a multiple of `d_model`.
    pub ffn_mult: f64,
    pub vocab: usize,
    pub seq_len: usize,
    pub precision: Precision,
}

impl Default for ModelConfig {
    /// Desk-scale default: byte-level vocabulary, minutes-scale training.
    fn default() -> Self {
        Self {
            d_model: 64,
            n_layers: 4,
            n_heads: 4,
            ffn_mult: 2.0,
            vocab: 256,
            seq_len: 64,
            precision: Precision::F32,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_layers == 0 || self.vocab < 2 || self.seq_len < 2 {
            return Err(Error::Config(format!("degenerate model config {self:?}")));
        }
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.ffn_dim() == 0 {
            return Err(Error::Config("ffn_mult too small".into()));
        }
        Ok(())
    }

    pub fn ffn_dim(&self) -> usize {
        (self.ffn_mult * self.d_model as f64).round() as usize
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Closed-form trainable parameter count.
    pub fn param_count(&self) -> usize {
        let d = self.d_model;
        let f = self.ffn_dim();
        let per_layer = 2 * d + 4 * d * d + 3 * d * f;
        self.vocab * d            // token embedding (low-rank learnable part)
            + self.seq_len * d    // positional table
            + self.n_layers * per_layer
            + d                   // final norm gain
            + d * self.vocab // LM head
    }
}
