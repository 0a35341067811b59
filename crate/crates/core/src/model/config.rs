use serde::{Deserialize, Serialize};

use super::ModelError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PosScheme {
    Learned,
    Rotary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq: usize,
    pub pos_scheme: PosScheme,
    #[serde(default = "default_tie")]
    pub tie_embeddings: bool,
    pub seed: u64,
}

fn default_tie() -> bool {
    true
}

impl ModelConfig {
    /// The default desk-scale shape: 8 blocks of width 128.
    pub fn toy(vocab_size: usize, seed: u64) -> Self {
        Self {
            n_layers: 8,
            d_model: 128,
            n_heads: 4,
            d_ff: 512,
            vocab_size,
            max_seq: 256,
            pos_scheme: PosScheme::Learned,
            tie_embeddings: true,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |m: String| Err(ModelError::Config(m));
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return fail(format!("d_model {} not divisible by {} heads", self.d_model, self.n_heads));
        }
        if self.pos_scheme == PosScheme::Rotary && (self.d_model / self.n_heads) % 2 != 0 {
            return fail("rotary embeddings need an even head width".into());
        }
        if self.n_layers < 2 {
            return fail(format!("need at least 2 layers, got {}", self.n_layers));
        }
        if self.vocab_size < 16 {
            return fail(format!("vocabulary of {} is below 16", self.vocab_size));
        }
        if self.max_seq < 64 {
            return fail(format!("max_seq {} is below 64", self.max_seq));
        }
        if self.d_ff == 0 {
            return fail("d_ff must be positive".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}
