use serde::{Deserialize, Serialize};

use super::ModelError;
use crate::features::FEATURE_DIM;

/// Network dimensions. [`Default`] is the full-size configuration
/// (384-d, 6 + 6 FFT blocks); [`ModelConfig::tiny`] is a desk-scale variant
/// used by tests and quick runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden_dim: usize,
    pub encoder_blocks: usize,
    pub decoder_blocks: usize,
    pub attention_heads: usize,
    pub conv_kernel_size: usize,
    pub conv_filter_dim: usize,
    pub phoneme_vocab_size: usize,
    pub pitch_vocab_size: usize,
    /// Note lengths above this share the last duration-embedding bucket.
    pub max_note_frames: usize,
    pub output_dim: usize,
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden_dim: 384,
            encoder_blocks: 6,
            decoder_blocks: 6,
            attention_heads: 2,
            conv_kernel_size: 3,
            conv_filter_dim: 1536,
            phoneme_vocab_size: 72,
            pitch_vocab_size: 128,
            max_note_frames: 512,
            output_dim: FEATURE_DIM,
            dropout: 0.1,
        }
    }
}

impl ModelConfig {
    pub fn tiny() -> Self {
        Self {
            hidden_dim: 16,
            encoder_blocks: 1,
            decoder_blocks: 1,
            attention_heads: 2,
            conv_kernel_size: 3,
            conv_filter_dim: 32,
            max_note_frames: 128,
            dropout: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.hidden_dim == 0 || self.attention_heads == 0 {
            return bad("hidden_dim and attention_heads must be positive".into());
        }
        if self.hidden_dim % self.attention_heads != 0 {
            return bad(format!(
                "hidden_dim {} is not divisible by attention_heads {}",
                self.hidden_dim, self.attention_heads
            ));
        }
        if self.conv_kernel_size % 2 == 0 {
            return bad(format!("conv_kernel_size {} must be odd", self.conv_kernel_size));
        }
        if self.conv_filter_dim == 0 || self.max_note_frames == 0 {
            return bad("conv_filter_dim and max_note_frames must be positive".into());
        }
        if self.phoneme_vocab_size < 2 || self.pitch_vocab_size == 0 {
            return bad("vocabulary sizes too small".into());
        }
        if self.output_dim != FEATURE_DIM {
            return bad(format!("output_dim must be {FEATURE_DIM}, got {}", self.output_dim));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        ModelConfig::default().validate().unwrap();
        ModelConfig::tiny().validate().unwrap();
        assert_eq!(ModelConfig::default().output_dim, 60 + 5 + 1 + 1);
    }

    #[test]
    fn rejects_indivisible_heads_and_wrong_output() {
        let c = ModelConfig {
            hidden_dim: 10,
            attention_heads: 3,
            ..ModelConfig::tiny()
        };
        assert!(c.validate().is_err());
        let c = ModelConfig {
            output_dim: 80,
            ..ModelConfig::tiny()
        };
        assert!(c.validate().is_err());
    }
}
