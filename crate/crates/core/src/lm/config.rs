use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shape of a decoder-only transformer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub context_window: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.context_window < 8 {
            return Err(Error::InvalidConfig(format!(
                "context_window {} < 8",
                self.context_window
            )));
        }
        if self.vocab_size == 0 || self.d_ff == 0 || self.n_layers == 0 {
            return Err(Error::InvalidConfig("zero-sized model dimension".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Same shape, different initialization seed.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }
}

/// Decoding settings for [`super::sample`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenerationConfig {
    pub temperature: f64,
    pub top_p: f64,
    pub max_new_tokens: usize,
    pub rng_seed: u64,
    /// Argmax decoding; stands in for the zero-temperature limit.
    #[serde(default)]
    pub greedy: bool,
}

impl GenerationConfig {
    pub fn sampled(temperature: f64, top_p: f64, max_new_tokens: usize, rng_seed: u64) -> Self {
        Self {
            temperature,
            top_p,
            max_new_tokens,
            rng_seed,
            greedy: false,
        }
    }

    pub fn greedy(max_new_tokens: usize) -> Self {
        Self {
            temperature: 1.0,
            top_p: 1.0,
            max_new_tokens,
            rng_seed: 0,
            greedy: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.greedy && !(self.temperature > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "temperature must be > 0, got {}",
                self.temperature
            )));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "top_p must lie in (0, 1], got {}",
                self.top_p
            )));
        }
        Ok(())
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.rng_seed = seed;
        self
    }
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self::sampled(0.7, 1.0, 64, 0)
    }
}
