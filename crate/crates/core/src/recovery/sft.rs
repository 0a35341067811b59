//! Supervised finetuning with Adam on response tokens only.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::perplexity::eval_perplexity;
use super::RecoveryError;
use crate::corpora::TrainingRecord;
use crate::model::{LayerMask, Model, ModelVars, PackedBatch};
use crate::numcore::{adam_step, clip_grad_norm, AdamState, Graph, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainHyper {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Linear warmup length; the rate is constant afterwards.
    pub warmup: usize,
    /// Held-out perplexity is recorded every `eval_every` steps (and at the end).
    pub eval_every: usize,
    pub clip_norm: f64,
    pub seed: u64,
}

impl Default for TrainHyper {
    fn default() -> Self {
        Self { steps: 500, batch_size: 32, lr: 3e-4, warmup: 50, eval_every: 50, clip_norm: 1.0, seed: 0 }
    }
}

impl TrainHyper {
    pub fn lr_at(&self, step: usize) -> f64 {
        if self.warmup > 0 && step < self.warmup {
            self.lr * (step + 1) as f64 / self.warmup as f64
        } else {
            self.lr
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeriesPoint {
    pub step: usize,
    pub train_loss: f64,
    pub heldout_ppl: Option<f64>,
}

/// Loss and held-out perplexity trajectory of one finetuning run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingRun {
    pub method: String,
    pub hyper: TrainHyper,
    pub mask: LayerMask,
    pub series: Vec<SeriesPoint>,
    /// Fingerprint of the final checkpoint.
    pub final_checkpoint: String,
    #[serde(default)]
    pub meta: BTreeMap<String, serde_json::Value>,
}

impl TrainingRun {
    pub fn final_heldout_ppl(&self) -> Option<f64> {
        self.series.iter().rev().find_map(|p| p.heldout_ppl)
    }

    pub fn ppl_at(&self, step: usize) -> Option<f64> {
        self.series.iter().find(|p| p.step == step).and_then(|p| p.heldout_ppl)
    }
}

/// Deterministic batch order: reshuffle the record indices every epoch.
pub struct BatchSampler {
    order: Vec<usize>,
    at: usize,
    rng: ChaCha8Rng,
}

impl BatchSampler {
    pub fn new(n: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        Self { order, at: 0, rng }
    }

    pub fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.at == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.at = 0;
            }
            out.push(self.order[self.at]);
            self.at += 1;
        }
        out
    }
}

pub fn pack(records: &[&TrainingRecord]) -> PackedBatch {
    let mut b = PackedBatch::default();
    for r in records {
        b.push(&r.tokens(), &r.loss_mask());
    }
    b
}

/// Fully finetunes `model` (in place) on `dataset` with `mask` applied.
pub fn sft(
    model: &mut Model,
    mask: &LayerMask,
    dataset: &[TrainingRecord],
    hyper: &TrainHyper,
    heldout: &[TrainingRecord],
) -> Result<TrainingRun, RecoveryError> {
    sft_with_callback(model, mask, dataset, hyper, heldout, |_, _| {})
}

/// As [`sft`], calling `on_step(step, loss)` after every optimiser step.
pub fn sft_with_callback(
    model: &mut Model,
    mask: &LayerMask,
    dataset: &[TrainingRecord],
    hyper: &TrainHyper,
    heldout: &[TrainingRecord],
    mut on_step: impl FnMut(usize, f64),
) -> Result<TrainingRun, RecoveryError> {
    mask.validate(model.n_layers())?;
    if hyper.steps > 0 && dataset.is_empty() {
        return Err(RecoveryError::EmptyDataset);
    }
    let mut series = Vec::new();
    let mut sampler = BatchSampler::new(dataset.len(), hyper.seed);
    let mut adam = {
        let params = model.weights.tensors_mut();
        AdamState::for_params(&params, hyper.lr)
    };
    let mut last_loss = f64::NAN;
    for step in 0..hyper.steps {
        let idx = sampler.next_batch(hyper.batch_size);
        let recs: Vec<&TrainingRecord> = idx.iter().map(|&i| &dataset[i]).collect();
        let batch = pack(&recs);
        let mut g = Graph::new();
        let vars = ModelVars::bind(&mut g, &model.weights, true);
        let loss = model.graph_loss(&mut g, &vars, &batch, mask, None)?;
        let loss_value = g.value(loss).item()?;
        if !loss_value.is_finite() {
            return Err(RecoveryError::NonFinite { step, state: format!("loss {loss_value}") });
        }
        g.backward(loss)?;
        vars.export_grads(&mut g, &mut model.weights)?;
        drop(g);
        let mut params = model.weights.tensors_mut();
        // Pruned blocks get zero gradient; leave them untouched.
        let mut active: Vec<&mut Tensor> = params.drain(..).collect();
        clip_grad_norm(&mut active, hyper.clip_norm);
        adam.lr = hyper.lr_at(step);
        adam_step(&mut active, &mut adam).map_err(|e| RecoveryError::NonFinite { step, state: e.to_string() })?;
        for p in active.iter_mut() {
            p.clear_grad();
        }
        last_loss = loss_value;
        on_step(step, loss_value);
        let s = step + 1;
        if hyper.eval_every > 0 && s % hyper.eval_every == 0 && s != hyper.steps {
            let ppl = if heldout.is_empty() { None } else { Some(eval_perplexity(model, mask, heldout)?) };
            series.push(SeriesPoint { step: s, train_loss: loss_value, heldout_ppl: ppl });
        }
    }
    let ppl = if heldout.is_empty() { None } else { Some(eval_perplexity(model, mask, heldout)?) };
    series.push(SeriesPoint { step: hyper.steps, train_loss: last_loss, heldout_ppl: ppl });
    Ok(TrainingRun {
        method: "sft".into(),
        hyper: hyper.clone(),
        mask: mask.clone(),
        series,
        final_checkpoint: format!("{:016x}", model.fingerprint()),
        meta: BTreeMap::new(),
    })
}
