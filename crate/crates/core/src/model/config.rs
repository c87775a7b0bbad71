use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Transformer dimensions shared by the dialog model's encoder and decoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ffn: usize,
    pub max_len: usize,
    pub dropout: f32,
}

impl ModelConfig {
    pub fn desk(vocab_size: usize) -> Self {
        ModelConfig {
            vocab_size,
            d_model: 64,
            n_layers: 2,
            n_heads: 2,
            d_ffn: 128,
            max_len: 64,
            dropout: 0.1,
        }
    }

    /// Dimensions of the published setup. Far too slow for this CPU
    /// implementation beyond smoke checks.
    pub fn paper(vocab_size: usize) -> Self {
        ModelConfig {
            vocab_size,
            d_model: 512,
            n_layers: 6,
            n_heads: 4,
            d_ffn: 1024,
            max_len: 256,
            dropout: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 5 {
            return Err(Error::Config(format!("vocab_size must be >= 5, got {}", self.vocab_size)));
        }
        if self.n_heads == 0 || self.d_model == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.d_ffn == 0 {
            return Err(Error::Config("d_ffn must be positive".into()));
        }
        if self.max_len < 2 {
            return Err(Error::Config(format!("max_len must be >= 2, got {}", self.max_len)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout must be in [0, 1), got {}", self.dropout)));
        }
        Ok(())
    }
}
