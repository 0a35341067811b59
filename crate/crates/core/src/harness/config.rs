use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::corpora::{MixtureConfig, TaskShare, Tokenizer};
use crate::model::ModelConfig;
use crate::pruning::Strategy;
use crate::recovery::{LowRankHyper, SgrParams, TrainHyper};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecoveryMethod {
    None,
    SftGt,
    SftSgr,
    LowrankSgr,
}

impl RecoveryMethod {
    pub fn name(self) -> &'static str {
        match self {
            RecoveryMethod::None => "none",
            RecoveryMethod::SftGt => "sft_gt",
            RecoveryMethod::SftSgr => "sft_sgr",
            RecoveryMethod::LowrankSgr => "lowrank_sgr",
        }
    }
}

impl std::str::FromStr for RecoveryMethod {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "none" => Ok(RecoveryMethod::None),
            "sft_gt" => Ok(RecoveryMethod::SftGt),
            "sft_sgr" => Ok(RecoveryMethod::SftSgr),
            "lowrank_sgr" => Ok(RecoveryMethod::LowrankSgr),
            other => Err(format!("unknown recovery method {other:?}")),
        }
    }
}

/// Evaluation tasks. `arith` and `minilang` are generative, `mcq` is scored
/// by log-likelihood, `probe` is the first-token arithmetic top-1.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Arith,
    Minilang,
    Mcq,
    Probe,
}

impl TaskKind {
    pub const ALL: [TaskKind; 4] = [TaskKind::Arith, TaskKind::Minilang, TaskKind::Mcq, TaskKind::Probe];

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Arith => "arith",
            TaskKind::Minilang => "minilang",
            TaskKind::Mcq => "mcq",
            TaskKind::Probe => "probe",
        }
    }

    pub fn is_generative(self) -> bool {
        matches!(self, TaskKind::Arith | TaskKind::Minilang)
    }
}

impl std::str::FromStr for TaskKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        TaskKind::ALL.into_iter().find(|t| t.name() == s).ok_or_else(|| format!("unknown task {s:?}"))
    }
}

/// How to train the unpruned baseline for one seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineSpec {
    pub model: ModelConfig,
    pub mixture: MixtureConfig,
    pub hyper: TrainHyper,
}

impl Default for BaselineSpec {
    fn default() -> Self {
        let tok = Tokenizer::new();
        Self {
            model: ModelConfig::toy(tok.vocab_size(), 0),
            mixture: MixtureConfig {
                arith: TaskShare::new(20000, 3.0),
                minilang: TaskShare::new(20000, 1.0),
                mcq: TaskShare::new(0, 0.0),
                seed: 1,
            },
            hyper: TrainHyper { steps: 1200, batch_size: 32, lr: 1e-3, warmup: 50, eval_every: 0, clip_norm: 1.0, seed: 0 },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSpec {
    pub n_arith: usize,
    pub n_minilang: usize,
    pub n_mcq: usize,
    pub n_probe: usize,
    /// Arithmetic items for the greedy pruning benchmark.
    pub n_calib: usize,
    /// Sequences for Block Influence.
    pub n_bi: usize,
}

impl Default for EvalSpec {
    fn default() -> Self {
        Self { n_arith: 200, n_minilang: 100, n_mcq: 200, n_probe: 200, n_calib: 100, n_bi: 32 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecoverySpec {
    pub hyper: TrainHyper,
    /// Training prompts per generative task.
    pub n_train: usize,
    /// Held-out records per task for perplexity.
    pub n_heldout: usize,
    pub sgr: SgrParams,
    pub lowrank: LowRankHyper,
    /// Learning rate for adapter training.
    pub lowrank_lr: f64,
}

impl Default for RecoverySpec {
    fn default() -> Self {
        Self {
            hyper: TrainHyper { steps: 300, batch_size: 32, lr: 3e-4, warmup: 50, eval_every: 50, clip_norm: 1.0, seed: 0 },
            n_train: 2000,
            n_heldout: 100,
            sgr: SgrParams::default(),
            lowrank: LowRankHyper::default(),
            lowrank_lr: 1e-3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub baseline: BaselineSpec,
    /// Existing checkpoint to use instead of training (applies to every seed).
    pub baseline_ckpt: Option<PathBuf>,
    pub strategies: Vec<Strategy>,
    pub ratios: Vec<f64>,
    pub recoveries: Vec<RecoveryMethod>,
    pub tasks: Vec<TaskKind>,
    pub seeds: Vec<u64>,
    pub protect_last: bool,
    pub eval: EvalSpec,
    pub recovery: RecoverySpec,
    pub out_dir: PathBuf,
    /// Where trained baselines are cached; defaults to `<out_dir>/cache`.
    pub cache_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            baseline: BaselineSpec::default(),
            baseline_ckpt: None,
            strategies: vec![Strategy::Reverse, Strategy::Bi, Strategy::Iterative],
            ratios: vec![0.0, 0.125, 0.25],
            recoveries: vec![RecoveryMethod::None, RecoveryMethod::SftGt, RecoveryMethod::SftSgr],
            tasks: vec![TaskKind::Arith, TaskKind::Minilang, TaskKind::Mcq, TaskKind::Probe],
            seeds: vec![1, 2, 3],
            protect_last: false,
            eval: EvalSpec::default(),
            recovery: RecoverySpec::default(),
            out_dir: PathBuf::from("prunelab-out"),
            cache_dir: None,
        }
    }
}

/// Layers removed for a pruning ratio: `floor(L·ratio)`.
pub fn layers_for_ratio(n_layers: usize, ratio: f64) -> usize {
    (n_layers as f64 * ratio + 1e-9).floor() as usize
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::Config(m));
        self.baseline.model.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        self.baseline.mixture.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        if self.seeds.is_empty() {
            return bad("at least one seed is required".into());
        }
        if self.tasks.is_empty() {
            return bad("at least one task is required".into());
        }
        let l = self.baseline.model.n_layers;
        for &r in &self.ratios {
            if !(0.0..1.0).contains(&r) {
                return bad(format!("ratio {r} outside [0, 1)"));
            }
            if layers_for_ratio(l, r) >= l {
                return bad(format!("ratio {r} removes every layer"));
            }
        }
        if let Some(p) = &self.baseline_ckpt {
            if !p.exists() {
                return bad(format!("baseline checkpoint {} does not exist", p.display()));
            }
        }
        if self.recovery.sgr.k == 0 || self.recovery.n_train == 0 {
            return bad("recovery needs k ≥ 1 and at least one training prompt".into());
        }
        Ok(())
    }

    pub fn cache_dir(&self) -> PathBuf {
        self.cache_dir.clone().unwrap_or_else(|| self.out_dir.join("cache"))
    }

    pub fn from_json(text: &str) -> Result<Self, HarnessError> {
        serde_json::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))
    }
}
