//! Architecture hyperparameters.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("invalid model config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub n_kv_heads: usize,
    pub head_dim: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    #[serde(default = "default_rope_theta")]
    pub rope_theta: f64,
    pub max_context: usize,
    #[serde(default)]
    pub qk_norm: bool,
    #[serde(default)]
    pub gating: bool,
    #[serde(default)]
    pub value_residual: bool,
    #[serde(default)]
    pub ln_scaling: bool,
    /// Embedding init std; width-independent so activation scales transfer.
    #[serde(default = "default_embed_init_std")]
    pub embed_init_std: f64,
    /// Output-logit multiplier (µP sets this to base_width/width).
    #[serde(default = "default_logit_scale")]
    pub logit_scale: f64,
}

fn default_rope_theta() -> f64 {
    10_000.0
}

fn default_embed_init_std() -> f64 {
    0.02
}

fn default_logit_scale() -> f64 {
    1.0
}

impl ModelConfig {
    /// Small all-toggles-off config used by tests.
    pub fn tiny(d_model: usize, n_layers: usize, vocab_size: usize) -> Self {
        let head_dim = if d_model >= 16 { 8 } else { 4 };
        let n_heads = d_model / head_dim;
        ModelConfig {
            d_model,
            n_layers,
            n_heads,
            n_kv_heads: n_heads,
            head_dim,
            ffn_dim: d_model * 2,
            vocab_size,
            rope_theta: default_rope_theta(),
            max_context: 128,
            qk_norm: false,
            gating: false,
            value_residual: false,
            ln_scaling: false,
            embed_init_std: default_embed_init_std(),
            logit_scale: default_logit_scale(),
        }
    }

    pub fn with_all_toggles(mut self, on: bool) -> Self {
        self.qk_norm = on;
        self.gating = on;
        self.value_residual = on;
        self.ln_scaling = on;
        self
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.n_layers < 1 {
            return Err(ConfigError::Invalid("n_layers must be >= 1".into()));
        }
        if self.vocab_size < 2 {
            return Err(ConfigError::Invalid("vocab_size must be >= 2".into()));
        }
        if self.n_kv_heads == 0 || !self.n_heads.is_multiple_of(self.n_kv_heads) {
            return Err(ConfigError::Invalid(format!(
                "n_heads {} must be divisible by n_kv_heads {}",
                self.n_heads, self.n_kv_heads
            )));
        }
        if self.d_model != self.n_heads * self.head_dim {
            return Err(ConfigError::Invalid(format!(
                "d_model {} != n_heads {} * head_dim {}",
                self.d_model, self.n_heads, self.head_dim
            )));
        }
        if !self.head_dim.is_multiple_of(2) {
            return Err(ConfigError::Invalid("head_dim must be even for RoPE".into()));
        }
        if self.max_context == 0 || self.ffn_dim == 0 {
            return Err(ConfigError::Invalid("max_context and ffn_dim must be positive".into()));
        }
        Ok(())
    }

    /// Query heads per KV head.
    pub fn gqa_group(&self) -> usize {
        self.n_heads / self.n_kv_heads
    }

    pub fn kv_dim(&self) -> usize {
        self.n_kv_heads * self.head_dim
    }
}
