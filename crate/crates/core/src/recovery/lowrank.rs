//! Low-rank adapters on the attention and FFN projections of a frozen model.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::perplexity::eval_perplexity;
use super::sft::{pack, BatchSampler, SeriesPoint, TrainHyper, TrainingRun};
use super::RecoveryError;
use crate::corpora::TrainingRecord;
use crate::model::{AdapterVars, BlockAdapterVars, LayerMask, Model, ModelVars};
use crate::numcore::{adam_step, clip_grad_norm, kernels, AdamState, Graph, Tensor};

/// `x·A·B·(α/r)` added to one projection: `A: d×r`, `B: r×d'`.
#[derive(Clone, Debug, PartialEq)]
pub struct LowRankAdapter {
    pub a: Tensor,
    pub b: Tensor,
    pub rank: usize,
    pub alpha: f64,
}

impl LowRankAdapter {
    /// Gaussian `A`, zero `B`: the adapter starts as an exact no-op.
    pub fn new(d_in: usize, d_out: usize, rank: usize, alpha: f64, rng: &mut ChaCha8Rng) -> Result<Self, RecoveryError> {
        if rank == 0 {
            return Err(RecoveryError::Rank);
        }
        let dist = Normal::new(0.0, 1.0 / (d_in as f64).sqrt()).expect("positive std");
        let a = Tensor::new(vec![d_in, rank], (0..d_in * rank).map(|_| dist.sample(rng)).collect())?;
        Ok(Self { a, b: Tensor::zeros(vec![rank, d_out]), rank, alpha })
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    /// `(α/r)·A·B`, the dense update this adapter represents.
    pub fn delta(&self) -> Vec<f64> {
        let (d_in, r) = (self.a.shape()[0], self.rank);
        let d_out = self.b.shape()[1];
        let s = self.scale();
        kernels::matmul(self.a.data(), self.b.data(), d_in, r, d_out).into_iter().map(|x| x * s).collect()
    }
}

/// Adapters for the four projections of one block.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockAdapters {
    pub qkv: LowRankAdapter,
    pub o: LowRankAdapter,
    pub up: LowRankAdapter,
    pub down: LowRankAdapter,
}

impl BlockAdapters {
    fn all(&self) -> [&LowRankAdapter; 4] {
        [&self.qkv, &self.o, &self.up, &self.down]
    }

    fn all_mut(&mut self) -> [&mut LowRankAdapter; 4] {
        [&mut self.qkv, &mut self.o, &mut self.up, &mut self.down]
    }
}

/// One optional adapter set per block; pruned blocks carry none.
#[derive(Clone, Debug, PartialEq)]
pub struct Adapters {
    pub blocks: Vec<Option<BlockAdapters>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LowRankHyper {
    pub rank: usize,
    pub alpha: f64,
}

impl Default for LowRankHyper {
    fn default() -> Self {
        Self { rank: 8, alpha: 16.0 }
    }
}

impl Adapters {
    pub fn new(model: &Model, mask: &LayerMask, lr: &LowRankHyper, seed: u64) -> Result<Self, RecoveryError> {
        if lr.rank == 0 {
            return Err(RecoveryError::Rank);
        }
        mask.validate(model.n_layers())?;
        let c = &model.config;
        let (d, f) = (c.d_model, c.d_ff);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut blocks = Vec::with_capacity(model.n_layers());
        for l in 0..model.n_layers() {
            if mask.contains(l) {
                blocks.push(None);
                continue;
            }
            blocks.push(Some(BlockAdapters {
                qkv: LowRankAdapter::new(d, 3 * d, lr.rank, lr.alpha, &mut rng)?,
                o: LowRankAdapter::new(d, d, lr.rank, lr.alpha, &mut rng)?,
                up: LowRankAdapter::new(d, f, lr.rank, lr.alpha, &mut rng)?,
                down: LowRankAdapter::new(f, d, lr.rank, lr.alpha, &mut rng)?,
            }));
        }
        Ok(Self { blocks })
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for b in self.blocks.iter_mut().flatten() {
            for ad in b.all_mut() {
                out.push(&mut ad.a);
                out.push(&mut ad.b);
            }
        }
        out
    }

    /// Puts every adapter on the graph as trainable parameters.
    pub fn bind(&self, g: &mut Graph) -> Vec<BlockAdapterVars> {
        let mut bind = |ad: &LowRankAdapter| AdapterVars { a: g.param(ad.a.clone()), b: g.param(ad.b.clone()), scale: ad.scale() };
        self.blocks
            .iter()
            .map(|b| match b {
                None => BlockAdapterVars::default(),
                Some(b) => BlockAdapterVars {
                    qkv: Some(bind(&b.qkv)),
                    o: Some(bind(&b.o)),
                    up: Some(bind(&b.up)),
                    down: Some(bind(&b.down)),
                },
            })
            .collect()
    }

    fn export_grads(&mut self, g: &mut Graph, vars: &[BlockAdapterVars]) -> Result<(), RecoveryError> {
        for (b, v) in self.blocks.iter_mut().zip(vars) {
            let Some(b) = b else { continue };
            let pairs = [v.qkv, v.o, v.up, v.down];
            for (ad, var) in b.all_mut().into_iter().zip(pairs) {
                let var = var.expect("adapter bound for every active block");
                ad.a.set_grad(g.take_grad(var.a).unwrap_or_else(|| vec![0.0; ad.a.numel()]))?;
                ad.b.set_grad(g.take_grad(var.b).unwrap_or_else(|| vec![0.0; ad.b.numel()]))?;
            }
        }
        Ok(())
    }

    /// A copy of `model` with every adapter folded into its base weight.
    pub fn merge(&self, model: &Model) -> Model {
        let mut out = model.clone();
        for (block, ads) in out.weights.blocks.iter_mut().zip(&self.blocks) {
            let Some(ads) = ads else { continue };
            let targets = [&mut block.w_qkv, &mut block.w_o, &mut block.w_up, &mut block.w_down];
            for (w, ad) in targets.into_iter().zip(ads.all()) {
                w.data_mut().iter_mut().zip(ad.delta()).for_each(|(x, d)| *x += d);
            }
        }
        out
    }
}

/// Trains adapters only, the base model staying frozen. Returns the run
/// and the trained adapters; merge them for inference.
pub fn lowrank_finetune(
    model: &Model,
    mask: &LayerMask,
    dataset: &[TrainingRecord],
    lr_cfg: &LowRankHyper,
    hyper: &TrainHyper,
    heldout: &[TrainingRecord],
) -> Result<(TrainingRun, Adapters), RecoveryError> {
    let mut adapters = Adapters::new(model, mask, lr_cfg, hyper.seed ^ 0x6c6f_7261)?;
    if hyper.steps > 0 && dataset.is_empty() {
        return Err(RecoveryError::EmptyDataset);
    }
    let mut sampler = BatchSampler::new(dataset.len(), hyper.seed);
    let mut adam = AdamState::for_params(&adapters.tensors_mut(), hyper.lr);
    let mut series = Vec::new();
    let mut last_loss = f64::NAN;
    let heldout_ppl = |ads: &Adapters| -> Result<Option<f64>, RecoveryError> {
        if heldout.is_empty() {
            return Ok(None);
        }
        Ok(Some(eval_perplexity(&ads.merge(model), mask, heldout)?))
    };
    for step in 0..hyper.steps {
        let idx = sampler.next_batch(hyper.batch_size);
        let recs: Vec<&TrainingRecord> = idx.iter().map(|&i| &dataset[i]).collect();
        let batch = pack(&recs);
        let mut g = Graph::new();
        let vars = ModelVars::bind(&mut g, &model.weights, false);
        let ad_vars = adapters.bind(&mut g);
        let loss = model.graph_loss(&mut g, &vars, &batch, mask, Some(&ad_vars))?;
        let loss_value = g.value(loss).item()?;
        if !loss_value.is_finite() {
            return Err(RecoveryError::NonFinite { step, state: format!("loss {loss_value}") });
        }
        g.backward(loss)?;
        adapters.export_grads(&mut g, &ad_vars)?;
        drop(g);
        let mut params = adapters.tensors_mut();
        clip_grad_norm(&mut params, hyper.clip_norm);
        adam.lr = hyper.lr_at(step);
        adam_step(&mut params, &mut adam).map_err(|e| RecoveryError::NonFinite { step, state: e.to_string() })?;
        params.iter_mut().for_each(|p| p.clear_grad());
        last_loss = loss_value;
        let s = step + 1;
        if hyper.eval_every > 0 && s % hyper.eval_every == 0 && s != hyper.steps {
            series.push(SeriesPoint { step: s, train_loss: loss_value, heldout_ppl: heldout_ppl(&adapters)? });
        }
    }
    series.push(SeriesPoint { step: hyper.steps, train_loss: last_loss, heldout_ppl: heldout_ppl(&adapters)? });
    let merged = adapters.merge(model);
    let mut meta = BTreeMap::new();
    meta.insert("rank".into(), lr_cfg.rank.into());
    meta.insert("alpha".into(), lr_cfg.alpha.into());
    let run = TrainingRun {
        method: "lowrank".into(),
        hyper: hyper.clone(),
        mask: mask.clone(),
        series,
        final_checkpoint: format!("{:016x}", merged.fingerprint()),
        meta,
    };
    Ok((run, adapters))
}
