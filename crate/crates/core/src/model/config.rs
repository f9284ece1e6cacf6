use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dimensions of the toy decoder-only transformer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_layers: usize,
    /// Residual stream width.
    pub d_model: usize,
    pub d_ffn: usize,
    /// Width of the Q/K/V projections (all heads concatenated).
    pub d_inner: usize,
    pub num_heads: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("num_layers", self.num_layers),
            ("d_model", self.d_model),
            ("d_ffn", self.d_ffn),
            ("d_inner", self.d_inner),
            ("num_heads", self.num_heads),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
        ];
        for (name, value) in dims {
            if value == 0 {
                return Err(Error::Config(format!("{name} must be >= 1")));
            }
        }
        if !self.d_inner.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!(
                "d_inner ({}) must be divisible by num_heads ({})",
                self.d_inner, self.num_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_inner / self.num_heads
    }

    /// Total number of gate logits across every layer and group.
    pub fn gate_count(&self) -> usize {
        self.num_layers * (4 * self.d_model + self.d_ffn + 3 * self.d_inner)
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_layers: 2,
            d_model: 64,
            d_ffn: 128,
            d_inner: 64,
            num_heads: 4,
            vocab_size: 192,
            max_seq_len: 48,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_indivisible_heads() {
        let cfg = ModelConfig {
            d_inner: 10,
            num_heads: 4,
            ..ModelConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn rejects_zero_dims() {
        let cfg = ModelConfig {
            d_ffn: 0,
            ..ModelConfig::default()
        };
        assert!(cfg.validate().is_err());
        assert!(ModelConfig::default().validate().is_ok());
    }

    #[test]
    fn gate_count_matches_group_lengths() {
        let cfg = ModelConfig::default();
        // 3 FFN groups (d, d_ffn, d) + 5 attention groups (d, 3 x d_inner, d)
        let per_layer = 64 + 128 + 64 + 64 + 3 * 64 + 64;
        assert_eq!(cfg.gate_count(), 2 * per_layer);
    }
}
