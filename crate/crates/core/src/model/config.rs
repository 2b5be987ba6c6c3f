use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenizer::VOCAB_SIZE;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub hidden: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    pub max_seq_len: usize,
    /// Rotary base frequency.
    pub rope_base: f64,
    #[serde(default)]
    pub tie_embeddings: bool,
    #[serde(default = "default_norm_eps")]
    pub norm_eps: f32,
    #[serde(default = "default_init_std")]
    pub init_std: f32,
}

fn default_norm_eps() -> f32 {
    1e-5
}

fn default_init_std() -> f32 {
    0.02
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::desk_default()
    }
}

impl ModelConfig {
    /// Hidden 128, 4 layers, 4 heads, FFN 352, context 512, base 10k.
    pub fn desk_default() -> Self {
        ModelConfig {
            vocab_size: VOCAB_SIZE,
            hidden: 128,
            n_layers: 4,
            n_heads: 4,
            ffn_dim: 352,
            max_seq_len: 512,
            rope_base: 10_000.0,
            tie_embeddings: false,
            norm_eps: default_norm_eps(),
            init_std: default_init_std(),
        }
    }

    /// Small configuration for quick experiments and tests.
    pub fn tiny(hidden: usize, n_layers: usize, n_heads: usize, max_seq_len: usize) -> Self {
        ModelConfig {
            hidden,
            n_layers,
            n_heads,
            ffn_dim: (8 * hidden / 3).div_ceil(8) * 8,
            max_seq_len,
            ..ModelConfig::desk_default()
        }
    }

    /// The 500M-parameter base model's shape (for parameter accounting only).
    pub fn gene42_base() -> Self {
        ModelConfig {
            hidden: 1408,
            n_layers: 16,
            n_heads: 16,
            ffn_dim: 5632,
            max_seq_len: 4096,
            ..ModelConfig::desk_default()
        }
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.n_heads.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::invalid_arg(m));
        if self.vocab_size == 0 || self.hidden == 0 || self.n_heads == 0 || self.ffn_dim == 0 {
            return bad(format!("model dimensions must be positive: {self:?}"));
        }
        if !self.hidden.is_multiple_of(self.n_heads) {
            return bad(format!("hidden {} not divisible by {} heads", self.hidden, self.n_heads));
        }
        if !self.head_dim().is_multiple_of(2) {
            return bad(format!("head_dim {} must be even for rotary pairs", self.head_dim()));
        }
        if self.max_seq_len < 2 {
            return bad(format!("max_seq_len {} must be at least 2", self.max_seq_len));
        }
        if !(self.rope_base > 0.0) || !self.rope_base.is_finite() {
            return bad(format!("rope_base {} must be positive", self.rope_base));
        }
        if !(self.norm_eps > 0.0) {
            return bad(format!("norm_eps {} must be positive", self.norm_eps));
        }
        Ok(())
    }

    /// Number of learnable scalars implied by the shapes.
    pub fn param_count(&self) -> usize {
        let (v, h, f) = (self.vocab_size, self.hidden, self.ffn_dim);
        let per_layer = 2 * h + 4 * h * h + 3 * h * f;
        let head = if self.tie_embeddings { 0 } else { h * v };
        v * h + self.n_layers * per_layer + h + head
    }
}
