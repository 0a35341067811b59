//! Post-pruning recovery: SFT on reference or self-generated responses,
//! low-rank adapters, and perplexity tracking.

mod lowrank;
mod perplexity;
mod sft;
mod sgr;

pub use lowrank::{lowrank_finetune, Adapters, BlockAdapters, LowRankAdapter, LowRankHyper};
pub use perplexity::{eval_perplexity, response_nll};
pub use sgr::{generate_sgr, Provenance, SgrDataset, SgrParams};
pub use sft::{pack, sft, sft_with_callback, BatchSampler, SeriesPoint, TrainHyper, TrainingRun};

use crate::corpora::CorpusError;
use crate::model::ModelError;
use crate::numcore::NumError;

#[derive(Debug, thiserror::Error)]
pub enum RecoveryError {
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("training diverged at step {step}: {state}")]
    NonFinite { step: usize, state: String },
    #[error("teacher must be the unpruned model, got mask {0:?}")]
    PrunedTeacher(Vec<usize>),
    #[error("invalid recovery config: {0}")]
    Config(String),
    #[error("adapter rank must be at least 1")]
    Rank,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Num(#[from] NumError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
}
