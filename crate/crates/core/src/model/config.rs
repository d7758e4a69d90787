//! Architecture dimensions for the micro decoder-only transformer.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::tokenizer::Tokenizer;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub vocab_size: usize,
    pub max_seq: usize,
}

impl Default for ModelConfig {
    /// Desk-scale default: trains on CPU in minutes while exercising every
    /// code path.
    fn default() -> Self {
        ModelConfig {
            n_layers: 4,
            d_model: 128,
            n_heads: 4,
            vocab_size: Tokenizer::default().vocab_size(),
            max_seq: 768,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 || self.d_model == 0 || self.n_heads == 0 || self.vocab_size == 0 {
            return Err(Error::config("model dimensions must be positive"));
        }
        if self.d_model % 2 != 0 {
            return Err(Error::config(format!(
                "d_model must be even, got {}",
                self.d_model
            )));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.max_seq == 0 {
            return Err(Error::config("max_seq must be at least 1"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// MLP hidden width.
    pub fn d_ff(&self) -> usize {
        4 * self.d_model
    }
}
