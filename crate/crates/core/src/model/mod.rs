//! Decoder-only transformer with per-block removal.

mod checkpoint;
mod config;
mod forward;
mod mask;
mod train;
mod weights;

pub use checkpoint::{decode, encode, fnv1a64, load_checkpoint, save_checkpoint, MAGIC, VERSION};
pub use config::{ModelConfig, PosScheme};
pub use forward::{argmax, DecodeState, ForwardOutput, GenerationParams, TokenDistribution};
pub use mask::LayerMask;
pub use train::{AdapterVars, BlockAdapterVars, BlockVars, ModelVars, PackedBatch};
pub use weights::{Block, TransformerWeights};

use crate::numcore::NumError;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("token {token} outside vocabulary of {vocab}")]
    Vocab { token: usize, vocab: usize },
    #[error("sequence of {len} tokens exceeds max_seq {max}")]
    Length { len: usize, max: usize },
    #[error("invalid layer mask: {0}")]
    Mask(String),
    #[error("scored span is empty")]
    EmptySpan,
    #[error("invalid span {0}")]
    Span(String),
    #[error("prompt is empty")]
    EmptyPrompt,
    #[error("restricted token set is empty")]
    EmptyRestrict,
    #[error("checkpoint format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Num(#[from] NumError),
}

/// Config plus weights: everything needed to run the network.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub weights: TransformerWeights,
}

impl Model {
    pub fn init(config: ModelConfig) -> Result<Self, ModelError> {
        let weights = TransformerWeights::init(&config)?;
        Ok(Self { config, weights })
    }

    pub fn n_layers(&self) -> usize {
        self.weights.blocks.len()
    }

    /// A copy with the given blocks physically deleted.
    pub fn without_layers(&self, layers: &[usize]) -> Model {
        let (weights, config) = self.weights.without_layers(&self.config, layers);
        Model { config, weights }
    }

    /// Content hash of the serialised checkpoint.
    pub fn fingerprint(&self) -> u64 {
        fnv1a64(&encode(self).expect("config serialises"))
    }
}
