//! Measurements: degeneration metrics, the first-token arithmetic probe,
//! multiple-choice and generative accuracy, and syntax-outcome histograms.

mod degeneration;
mod eval;

pub use degeneration::{bleu4, rep4, self_bleu4, DegenerationReport};
pub use eval::{
    arithmetic_probe, eval_params, generate_all, generative_accuracy, grade, mcq_accuracy, mcq_predict, prompt_tokens,
    syntax_distribution, syntax_outcomes, ArithmeticProbeResult, EvalScore, GenTasks, SyntaxHistogram, PROBE_N,
};

use crate::corpora::CorpusError;
use crate::model::ModelError;

#[derive(Debug, thiserror::Error)]
pub enum DiagError {
    #[error("nothing to measure: {0}")]
    NoEligible(String),
    #[error("invalid probe: {0}")]
    Probe(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
}
