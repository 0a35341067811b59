//! Layer-selection strategies: reverse order, Block Influence, single-layer
//! sweeps and greedy iterative pruning.

use serde::{Deserialize, Serialize};

use crate::model::{LayerMask, Model, ModelError};
use crate::par::par_map;

#[derive(Debug, thiserror::Error)]
pub enum PruneError {
    #[error("cannot remove {n} of {layers} layers (at most {max})")]
    TooMany { n: usize, layers: usize, max: usize },
    #[error("calibration error: {0}")]
    Calibration(String),
    #[error("candidate layer {layer} outside 0..{layers}")]
    Candidate { layer: usize, layers: usize },
    #[error("benchmark failed: {0}")]
    Benchmark(String),
    #[error("benchmark returned a non-finite score for mask {0:?}")]
    NonFiniteScore(Vec<usize>),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Reverse,
    Bi,
    Iterative,
    Manual,
}

impl Strategy {
    pub fn name(self) -> &'static str {
        match self {
            Strategy::Reverse => "reverse",
            Strategy::Bi => "bi",
            Strategy::Iterative => "iterative",
            Strategy::Manual => "manual",
        }
    }
}

impl std::str::FromStr for Strategy {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "reverse" => Ok(Strategy::Reverse),
            "bi" => Ok(Strategy::Bi),
            "iterative" => Ok(Strategy::Iterative),
            "manual" => Ok(Strategy::Manual),
            other => Err(format!("unknown strategy {other:?}")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerScore {
    pub layer: usize,
    pub score: f64,
}

/// One record of how a plan was chosen.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TraceEntry {
    /// A greedy round: every candidate scored with the layers chosen so far removed.
    Round { round: usize, chosen: usize, score: f64, candidates: Vec<LayerScore> },
    /// A per-layer importance score.
    Layer(LayerScore),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrunePlan {
    pub strategy: Strategy,
    pub removed: LayerMask,
    #[serde(default)]
    pub trace: Vec<TraceEntry>,
}

impl PrunePlan {
    pub fn manual(n_layers: usize, removed: impl IntoIterator<Item = usize>) -> Result<Self, PruneError> {
        let removed = LayerMask::checked(removed, n_layers)?;
        check_count(n_layers, removed.len(), false)?;
        Ok(Self { strategy: Strategy::Manual, removed, trace: Vec::new() })
    }

    /// Score recorded for the final greedy round, if any.
    pub fn final_score(&self) -> Option<f64> {
        self.trace.iter().rev().find_map(|t| match t {
            TraceEntry::Round { score, .. } => Some(*score),
            TraceEntry::Layer(_) => None,
        })
    }
}

/// `1 − mean cosine(h_in, h_out)` per block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct BIScores(pub Vec<f64>);

impl BIScores {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub baseline: f64,
    pub candidates: Vec<usize>,
    pub scores: Vec<f64>,
}

impl SweepResult {
    /// Candidate whose removal scores highest; ties go to the shallower layer.
    pub fn argmax(&self) -> Option<usize> {
        best_of(self.candidates.iter().copied().zip(self.scores.iter().copied())).map(|(l, _)| l)
    }
}

fn check_count(n_layers: usize, n: usize, protect_last: bool) -> Result<(), PruneError> {
    let max = if protect_last { n_layers.saturating_sub(2) } else { n_layers.saturating_sub(1) };
    if n > max {
        return Err(PruneError::TooMany { n, layers: n_layers, max });
    }
    Ok(())
}

/// Highest score, first (shallowest) on ties. Candidates must arrive in ascending layer order.
fn best_of(scored: impl Iterator<Item = (usize, f64)>) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (l, s) in scored {
        if best.map_or(true, |(_, b)| s > b) {
            best = Some((l, s));
        }
    }
    best
}

fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    if aa == 0.0 || bb == 0.0 {
        return None;
    }
    Some((ab / (aa.sqrt() * bb.sqrt())).clamp(-1.0, 1.0))
}

/// Block Influence over calibration sequences, from the unmasked boundary hidden states.
pub fn bi_scores(model: &Model, calibration: &[Vec<usize>]) -> Result<BIScores, PruneError> {
    if calibration.is_empty() {
        return Err(PruneError::Calibration("no calibration sequences".into()));
    }
    let n_layers = model.n_layers();
    let d = model.config.d_model;
    let mut sums = vec![0.0; n_layers];
    let mut counts = vec![0usize; n_layers];
    let outputs = par_map(calibration, |seq| model.forward(seq, &LayerMask::empty()));
    for out in outputs {
        let out = out?;
        for l in 0..n_layers {
            let (hin, hout) = (out.hidden[l].data(), out.hidden[l + 1].data());
            for (a, b) in hin.chunks_exact(d).zip(hout.chunks_exact(d)) {
                if let Some(c) = cosine(a, b) {
                    sums[l] += c;
                    counts[l] += 1;
                }
            }
        }
    }
    let mut scores = Vec::with_capacity(n_layers);
    for l in 0..n_layers {
        if counts[l] == 0 {
            return Err(PruneError::Calibration(format!("layer {l}: every hidden state has zero norm")));
        }
        scores.push((1.0 - sums[l] / counts[l] as f64).clamp(0.0, 2.0));
    }
    Ok(BIScores(scores))
}

/// Removes the `n` deepest layers, sparing the last one when `protect_last` is set.
pub fn plan_reverse(n_layers: usize, n: usize, protect_last: bool) -> Result<PrunePlan, PruneError> {
    check_count(n_layers, n, protect_last)?;
    let top = if protect_last { n_layers - 1 } else { n_layers };
    Ok(PrunePlan { strategy: Strategy::Reverse, removed: LayerMask::new(top - n..top), trace: Vec::new() })
}

/// Removes the `n` lowest-scoring layers; ties go to the shallower index.
/// With `protect_last` the final block is never chosen.
pub fn plan_bi(scores: &BIScores, n: usize, protect_last: bool) -> Result<PrunePlan, PruneError> {
    check_count(scores.len(), n, protect_last)?;
    if scores.0.iter().any(|s| !s.is_finite()) {
        return Err(PruneError::Calibration("non-finite BI score".into()));
    }
    let eligible = if protect_last { scores.len() - 1 } else { scores.len() };
    let mut order: Vec<usize> = (0..eligible).collect();
    order.sort_by(|&a, &b| scores.0[a].total_cmp(&scores.0[b]).then(a.cmp(&b)));
    let trace = scores.0.iter().enumerate().map(|(layer, &score)| TraceEntry::Layer(LayerScore { layer, score })).collect();
    Ok(PrunePlan { strategy: Strategy::Bi, removed: LayerMask::new(order.into_iter().take(n)), trace })
}

fn score_masks<F>(masks: &[LayerMask], bench: &F) -> Result<Vec<f64>, PruneError>
where
    F: Fn(&LayerMask) -> Result<f64, PruneError> + Sync,
{
    par_map(masks, |m| {
        let s = bench(m)?;
        if s.is_finite() {
            Ok(s)
        } else {
            Err(PruneError::NonFiniteScore(m.to_vec()))
        }
    })
    .into_iter()
    .collect()
}

/// Scores the model with each candidate layer removed on its own. `None`
/// means every layer except layer 0.
pub fn single_layer_sweep<F>(model: &Model, bench: F, candidates: Option<&[usize]>) -> Result<SweepResult, PruneError>
where
    F: Fn(&LayerMask) -> Result<f64, PruneError> + Sync,
{
    let n_layers = model.n_layers();
    let mut candidates = candidates.map_or_else(|| (1..n_layers).collect(), <[usize]>::to_vec);
    candidates.sort_unstable();
    candidates.dedup();
    if let Some(&layer) = candidates.iter().find(|&&l| l >= n_layers) {
        return Err(PruneError::Candidate { layer, layers: n_layers });
    }
    let mut masks = vec![LayerMask::empty()];
    masks.extend(candidates.iter().map(|&l| LayerMask::new([l])));
    let mut scores = score_masks(&masks, &bench)?;
    let baseline = scores.remove(0);
    Ok(SweepResult { baseline, candidates, scores })
}

/// Algorithm 1: `n` rounds, each removing the remaining layer whose removal
/// (on top of the layers already chosen) scores highest. With `protect_last`
/// the final block is never a candidate.
pub fn greedy_iterative<F>(model: &Model, bench: F, n: usize, protect_last: bool) -> Result<PrunePlan, PruneError>
where
    F: Fn(&LayerMask) -> Result<f64, PruneError> + Sync,
{
    let n_layers = model.n_layers();
    check_count(n_layers, n, protect_last)?;
    let mut removed = LayerMask::empty();
    let mut trace = Vec::with_capacity(n);
    for round in 0..n {
        let mut remaining = removed.kept(n_layers);
        if protect_last {
            remaining.retain(|&l| l + 1 != n_layers);
        }
        let masks: Vec<LayerMask> = remaining.iter().map(|&l| removed.with(l)).collect();
        let scores = score_masks(&masks, &bench)?;
        let (chosen, score) = best_of(remaining.iter().copied().zip(scores.iter().copied())).expect("a layer remains");
        let candidates = remaining.iter().zip(&scores).map(|(&layer, &score)| LayerScore { layer, score }).collect();
        trace.push(TraceEntry::Round { round, chosen, score, candidates });
        removed.insert(chosen);
    }
    Ok(PrunePlan { strategy: Strategy::Iterative, removed, trace })
}
