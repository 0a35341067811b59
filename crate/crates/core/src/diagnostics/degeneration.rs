use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use super::DiagError;

/// Mean over responses of at least four tokens of `1 − unique/total` 4-grams.
pub fn rep4(responses: &[Vec<usize>]) -> Result<f64, DiagError> {
    let mut sum = 0.0;
    let mut eligible = 0usize;
    for r in responses.iter().filter(|r| r.len() >= 4) {
        let total = r.len() - 3;
        let unique: HashSet<&[usize]> = r.windows(4).collect();
        sum += (total - unique.len()) as f64 / total as f64;
        eligible += 1;
    }
    if eligible == 0 {
        return Err(DiagError::NoEligible("no response has 4 or more tokens".into()));
    }
    Ok(sum / eligible as f64)
}

fn ngram_counts(seq: &[usize], n: usize) -> HashMap<&[usize], usize> {
    let mut m = HashMap::new();
    for g in seq.windows(n) {
        *m.entry(g).or_insert(0) += 1;
    }
    m
}

/// Sentence BLEU-4 of `hyp` against `refs`, with add-one smoothing on n-gram
/// orders whose clipped count is zero and a brevity penalty against the
/// closest reference length (shorter wins ties).
pub fn bleu4(hyp: &[usize], refs: &[&[usize]]) -> f64 {
    if hyp.is_empty() || refs.is_empty() {
        return 0.0;
    }
    let mut log_p = 0.0;
    for n in 1..=4 {
        let total = hyp.len().saturating_sub(n - 1);
        let hc = ngram_counts(hyp, n);
        let mut max_ref: HashMap<&[usize], usize> = HashMap::new();
        for r in refs {
            for (g, c) in ngram_counts(r, n) {
                let e = max_ref.entry(g).or_insert(0);
                *e = (*e).max(c);
            }
        }
        let clipped: usize = hc.iter().map(|(g, &c)| c.min(max_ref.get(g).copied().unwrap_or(0))).sum();
        let p = if clipped == 0 { 1.0 / (total as f64 + 1.0) } else { clipped as f64 / total as f64 };
        log_p += p.ln() / 4.0;
    }
    let c = hyp.len() as f64;
    let r = refs
        .iter()
        .map(|r| r.len())
        .min_by_key(|&len| (len.abs_diff(hyp.len()), len))
        .expect("at least one reference") as f64;
    let bp = if c > r { 1.0 } else { (1.0 - r / c).exp() };
    bp * log_p.exp()
}

/// Mean BLEU-4 of each response against all the others.
pub fn self_bleu4(responses: &[Vec<usize>]) -> Result<f64, DiagError> {
    if responses.len() < 2 {
        return Err(DiagError::NoEligible(format!("self-BLEU needs at least 2 responses, got {}", responses.len())));
    }
    let mut sum = 0.0;
    for (i, h) in responses.iter().enumerate() {
        let refs: Vec<&[usize]> =
            responses.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, r)| r.as_slice()).collect();
        sum += bleu4(h, &refs);
    }
    Ok(sum / responses.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DegenerationReport {
    pub rep4: f64,
    pub self_bleu4: f64,
    pub avg_tokens: f64,
    pub n: usize,
    /// Ratios to a baseline report; `None` when the baseline value is zero.
    pub rep4_ratio: Option<f64>,
    pub self_bleu4_ratio: Option<f64>,
    pub avg_tokens_ratio: Option<f64>,
    pub rep4_delta: f64,
    pub self_bleu4_delta: f64,
    pub avg_tokens_delta: f64,
}

fn ratio(v: f64, base: f64) -> Option<f64> {
    (base > 0.0).then(|| v / base)
}

impl DegenerationReport {
    pub fn measure(responses: &[Vec<usize>]) -> Result<Self, DiagError> {
        let avg_tokens = if responses.is_empty() {
            0.0
        } else {
            responses.iter().map(|r| r.len() as f64).sum::<f64>() / responses.len() as f64
        };
        Ok(Self {
            rep4: rep4(responses)?,
            self_bleu4: self_bleu4(responses)?,
            avg_tokens,
            n: responses.len(),
            rep4_ratio: Some(1.0),
            self_bleu4_ratio: Some(1.0),
            avg_tokens_ratio: Some(1.0),
            rep4_delta: 0.0,
            self_bleu4_delta: 0.0,
            avg_tokens_delta: 0.0,
        })
    }

    /// Fills the ratio and delta fields relative to `baseline`.
    pub fn normalized(mut self, baseline: &DegenerationReport) -> Self {
        self.rep4_ratio = ratio(self.rep4, baseline.rep4);
        self.self_bleu4_ratio = ratio(self.self_bleu4, baseline.self_bleu4);
        self.avg_tokens_ratio = ratio(self.avg_tokens, baseline.avg_tokens);
        self.rep4_delta = self.rep4 - baseline.rep4;
        self.self_bleu4_delta = self.self_bleu4 - baseline.self_bleu4;
        self.avg_tokens_delta = self.avg_tokens - baseline.avg_tokens;
        self
    }
}
