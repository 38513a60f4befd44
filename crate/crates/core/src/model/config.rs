use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture hyperparameters shared by the online and target networks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_encoder_layers: usize,
    pub num_decoder_layers: usize,
    pub model_dim: usize,
    pub feedforward_dim: usize,
    pub num_heads: usize,
    pub num_memory_slots: usize,
    pub dropout: f64,
    pub vocab_size: usize,
    pub max_length: usize,
    pub mesh: bool,
    /// Width of each input feature cell.
    pub feature_dim: usize,
}

impl Default for ModelConfig {
    /// Desk-scale defaults.
    fn default() -> Self {
        ModelConfig {
            num_encoder_layers: 2,
            num_decoder_layers: 2,
            model_dim: 64,
            feedforward_dim: 256,
            num_heads: 4,
            num_memory_slots: 8,
            dropout: 0.1,
            vocab_size: 200,
            max_length: 24,
            mesh: false,
            feature_dim: 32,
        }
    }
}

impl ModelConfig {
    /// Full-size settings: 3+3 layers, width 512, 8 heads, 40 memory slots.
    pub fn full_scale(vocab_size: usize, feature_dim: usize) -> Self {
        ModelConfig {
            num_encoder_layers: 3,
            num_decoder_layers: 3,
            model_dim: 512,
            feedforward_dim: 2048,
            num_heads: 8,
            num_memory_slots: 40,
            dropout: 0.1,
            vocab_size,
            max_length: 24,
            mesh: false,
            feature_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_encoder_layers == 0 || self.num_decoder_layers == 0 {
            return bad("encoder and decoder need at least one layer".into());
        }
        if self.model_dim == 0 || self.num_heads == 0 || !self.model_dim.is_multiple_of(self.num_heads) {
            return bad(format!(
                "model_dim {} must be a positive multiple of num_heads {}",
                self.model_dim, self.num_heads
            ));
        }
        if self.feedforward_dim == 0 || self.feature_dim == 0 {
            return bad("feedforward_dim and feature_dim must be positive".into());
        }
        if self.vocab_size < 4 {
            return bad(format!("vocab_size {} is below 4", self.vocab_size));
        }
        if self.max_length < 2 {
            return bad("max_length must be at least 2".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} not in [0, 1)", self.dropout));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.num_heads
    }
}
