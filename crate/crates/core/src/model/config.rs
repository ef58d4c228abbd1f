use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::paging::TokenId;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Includes the reserved bookmark id, which is always `vocab_size - 1`.
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    /// Tokens per page (`w`).
    pub page_size: usize,
    pub max_positions: usize,
    pub rope_base: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 128,
            d_model: 64,
            n_heads: 4,
            n_layers: 4,
            d_ff: 256,
            page_size: 128,
            max_positions: 65_536,
            rope_base: 10_000.0,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Small smoke-test model: d 64, 4 layers, 4 heads, w 16.
    pub fn toy() -> Self {
        Self { page_size: 16, ..Self::default() }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn bookmark_token(&self) -> TokenId {
        (self.vocab_size - 1) as TokenId
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.vocab_size < 2 {
            return bad("vocab_size must be at least 2");
        }
        if self.n_heads == 0 || self.d_model == 0 || self.d_model % self.n_heads != 0 {
            return bad("d_model must be a positive multiple of n_heads");
        }
        if self.head_dim() % 2 != 0 {
            return bad("head_dim must be even for rotary encoding");
        }
        if self.n_layers == 0 || self.d_ff == 0 {
            return bad("n_layers and d_ff must be positive");
        }
        if self.page_size == 0 {
            return bad("page_size must be at least 1");
        }
        if self.rope_base <= 1.0 {
            return bad("rope_base must exceed 1");
        }
        Ok(())
    }
}
