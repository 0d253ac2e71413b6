//! Model hyperparameters.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

impl Default for Precision {
    fn default() -> Self {
        Precision::F32
    }
}

#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    /// Key/value head count; query heads share K/V in groups of
    /// `n_heads / n_kv_heads`.
    pub n_kv_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    #[serde(default = "default_latent_dim")]
    pub latent_dim: usize,
    #[serde(default = "default_rope_base")]
    pub rope_base: f64,
    #[serde(default)]
    pub adaln_enabled: bool,
    #[serde(default)]
    pub precision: Precision,
}

fn default_latent_dim() -> usize {
    64
}

fn default_rope_base() -> f64 {
    10_000.0
}

impl ModelConfig {
    /// Desk-scale defaults: small enough for full finite-difference checks
    /// and CPU training, large enough to fit the toy corpus.
    pub fn tiny() -> Self {
        ModelConfig {
            d_model: 128,
            n_layers: 4,
            n_heads: 4,
            n_kv_heads: 2,
            d_ff: 344,
            vocab_size: 64,
            latent_dim: default_latent_dim(),
            rope_base: default_rope_base(),
            adaln_enabled: false,
            precision: Precision::F32,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Total width of the K/V projections.
    pub fn kv_dim(&self) -> usize {
        self.n_kv_heads * self.head_dim()
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.d_model == 0 || self.n_layers == 0 || self.n_heads == 0 || self.d_ff == 0 {
            return fail("d_model, n_layers, n_heads, d_ff must be positive".into());
        }
        if self.vocab_size == 0 {
            return fail("vocab_size must be positive".into());
        }
        if self.d_model % self.n_heads != 0 {
            return fail(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.head_dim() % 2 != 0 {
            return fail(format!(
                "head_dim {} must be even for rotary pairs",
                self.head_dim()
            ));
        }
        if self.n_kv_heads == 0 || self.n_kv_heads > self.n_heads {
            return fail(format!(
                "n_kv_heads {} must be in 1..={}",
                self.n_kv_heads, self.n_heads
            ));
        }
        if self.n_heads % self.n_kv_heads != 0 {
            return fail(format!(
                "n_heads {} not divisible by n_kv_heads {}",
                self.n_heads, self.n_kv_heads
            ));
        }
        if self.latent_dim == 0 {
            return fail("latent_dim must be positive".into());
        }
        if !(self.rope_base > 1.0) {
            return fail(format!("rope_base {} must exceed 1", self.rope_base));
        }
        Ok(())
    }
}
