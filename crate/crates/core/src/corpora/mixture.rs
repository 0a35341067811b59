use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::tokenizer::{Tokenizer, BOS, EOS};
use super::{gen_arithmetic, gen_mcq, gen_minilang_tasks, CorpusError, CorpusRecord};

/// How many distinct examples a task contributes and how often they are
/// repeated: the task yields `round(count · weight)` records, cycling
/// through its examples.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskShare {
    pub count: usize,
    pub weight: f64,
}

impl TaskShare {
    pub fn new(count: usize, weight: f64) -> Self {
        Self { count, weight }
    }

    fn records(&self) -> usize {
        (self.count as f64 * self.weight).round() as usize
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixtureConfig {
    pub arith: TaskShare,
    pub minilang: TaskShare,
    pub mcq: TaskShare,
    pub seed: u64,
}

impl MixtureConfig {
    pub fn validate(&self) -> Result<(), CorpusError> {
        for s in [self.arith, self.minilang, self.mcq] {
            if !(s.weight >= 0.0 && s.weight.is_finite()) {
                return Err(CorpusError::Config(format!("invalid weight {}", s.weight)));
            }
        }
        Ok(())
    }
}

/// Derives an independent stream seed for a sub-task.
pub fn sub_seed(seed: u64, tag: u64) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(tag.wrapping_mul(0xbf58_476d_1ce4_e5b9)) ^ tag
}

/// One tokenised supervision record.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingRecord {
    /// BOS followed by the prompt characters.
    pub prompt: Vec<usize>,
    /// Response characters followed by EOS.
    pub response: Vec<usize>,
}

impl TrainingRecord {
    pub fn encode(tok: &Tokenizer, prompt: &str, response: &str) -> Result<Self, CorpusError> {
        let mut p = vec![BOS];
        p.extend(tok.tokenize(prompt)?);
        let mut r = tok.tokenize(response)?;
        r.push(EOS);
        Ok(Self { prompt: p, response: r })
    }

    pub fn tokens(&self) -> Vec<usize> {
        let mut t = self.prompt.clone();
        t.extend_from_slice(&self.response);
        t
    }

    /// True exactly on response positions.
    pub fn loss_mask(&self) -> Vec<bool> {
        let mut m = vec![false; self.prompt.len()];
        m.extend(std::iter::repeat(true).take(self.response.len()));
        m
    }

    pub fn len(&self) -> usize {
        self.prompt.len() + self.response.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Text records for a mixture, shuffled deterministically by seed.
pub fn mixture_records(cfg: &MixtureConfig) -> Result<Vec<CorpusRecord>, CorpusError> {
    cfg.validate()?;
    let mut out = Vec::new();
    let cycle = |n: usize, len: usize| (0..n).map(move |i| i % len.max(1));
    if cfg.arith.records() > 0 && cfg.arith.count > 0 {
        let items = gen_arithmetic(sub_seed(cfg.seed, 1), cfg.arith.count);
        out.extend(cycle(cfg.arith.records(), items.len()).map(|i| CorpusRecord::arithmetic(&items[i])));
    }
    if cfg.minilang.records() > 0 && cfg.minilang.count > 0 {
        let items = gen_minilang_tasks(sub_seed(cfg.seed, 2), cfg.minilang.count);
        out.extend(cycle(cfg.minilang.records(), items.len()).map(|i| CorpusRecord::minilang(&items[i])));
    }
    if cfg.mcq.records() > 0 && cfg.mcq.count > 0 {
        let items = gen_mcq(sub_seed(cfg.seed, 3), cfg.mcq.count);
        out.extend(cycle(cfg.mcq.records(), items.len()).map(|i| CorpusRecord::mcq(&items[i])));
    }
    if out.is_empty() {
        return Err(CorpusError::EmptyMixture);
    }
    out.shuffle(&mut ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, 4)));
    Ok(out)
}

/// Tokenised training set with loss on the response span only.
pub fn build_mixture(cfg: &MixtureConfig, tok: &Tokenizer) -> Result<Vec<TrainingRecord>, CorpusError> {
    mixture_records(cfg)?.iter().map(|r| r.encode(tok)).collect()
}
