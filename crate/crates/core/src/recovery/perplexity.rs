use super::RecoveryError;
use crate::corpora::TrainingRecord;
use crate::model::{LayerMask, Model};
use crate::numcore::kernels;

/// Total response-token negative log-likelihood and token count.
pub fn response_nll(model: &Model, mask: &LayerMask, records: &[TrainingRecord]) -> Result<(f64, usize), RecoveryError> {
    let v = model.config.vocab_size;
    let mut total = 0.0;
    let mut count = 0;
    for r in records {
        let tokens = r.tokens();
        let logits = model.logits(&tokens[..tokens.len() - 1], mask)?;
        let start = r.prompt.len();
        for p in start..tokens.len() {
            let row = &logits[(p - 1) * v..p * v];
            total -= kernels::log_softmax(row)[tokens[p]];
            count += 1;
        }
    }
    Ok((total, count))
}

/// `exp(mean response-token cross-entropy)` over a held-out set.
pub fn eval_perplexity(model: &Model, mask: &LayerMask, heldout: &[TrainingRecord]) -> Result<f64, RecoveryError> {
    let (nll, count) = response_nll(model, mask, heldout)?;
    if count == 0 {
        return Err(RecoveryError::EmptyDataset);
    }
    Ok((nll / count as f64).exp())
}
