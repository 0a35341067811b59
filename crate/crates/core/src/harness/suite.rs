//! Evaluation sets, recovery corpora and task scoring for one seed.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{EvalSpec, RecoverySpec, TaskKind};
use super::HarnessError;
use crate::corpora::{
    gen_arithmetic, gen_mcq, gen_minilang_tasks, sub_seed, ArithmeticExample, CorpusRecord, MCQExample, MiniLangTask,
    Tokenizer, TrainingRecord, TASK_PREFIX, TASK_SUFFIX,
};
use crate::diagnostics::{
    arithmetic_probe, eval_params, generative_accuracy, mcq_accuracy, syntax_distribution, GenTasks, SyntaxHistogram,
};
use crate::model::{LayerMask, Model};
use crate::pruning::PruneError;

/// Every evaluation set used for one seed.
#[derive(Clone, Debug)]
pub struct EvalSuite {
    pub arith: GenTasks,
    pub minilang: GenTasks,
    pub minilang_tasks: Vec<MiniLangTask>,
    pub mcq: Vec<MCQExample>,
    pub probe: Vec<ArithmeticExample>,
    /// Arithmetic items scoring candidate masks during greedy pruning.
    pub calib: GenTasks,
    /// Token sequences for Block Influence.
    pub bi_calib: Vec<Vec<usize>>,
}

impl EvalSuite {
    pub fn new(spec: &EvalSpec, seed: u64, tok: &Tokenizer) -> Result<Self, HarnessError> {
        let s = |tag| sub_seed(seed, tag);
        let minilang_tasks = gen_minilang_tasks(s(0x21), spec.n_minilang);
        let mut bi_calib = Vec::with_capacity(spec.n_bi);
        let bi_arith = gen_arithmetic(s(0x26), spec.n_bi.div_ceil(2));
        let bi_code = gen_minilang_tasks(s(0x27), spec.n_bi / 2);
        let records = bi_arith.iter().map(CorpusRecord::arithmetic).chain(bi_code.iter().map(CorpusRecord::minilang));
        for r in records.take(spec.n_bi) {
            bi_calib.push(r.encode(tok)?.tokens());
        }
        Ok(Self {
            arith: GenTasks::Arith(gen_arithmetic(s(0x20), spec.n_arith)),
            minilang: GenTasks::MiniLang(minilang_tasks.clone()),
            minilang_tasks,
            mcq: gen_mcq(s(0x22), spec.n_mcq),
            probe: gen_arithmetic(s(0x23), spec.n_probe),
            calib: GenTasks::Arith(gen_arithmetic(s(0x24), spec.n_calib)),
            bi_calib,
        })
    }

    /// Raw score of one task; `probe` compares against `baseline`.
    pub fn score(
        &self,
        task: TaskKind,
        baseline: &Model,
        model: &Model,
        mask: &LayerMask,
        tok: &Tokenizer,
    ) -> Result<f64, HarnessError> {
        Ok(match task {
            TaskKind::Arith => generative_accuracy(model, mask, &self.arith, &eval_params(&self.arith), tok)?.accuracy,
            TaskKind::Minilang => {
                generative_accuracy(model, mask, &self.minilang, &eval_params(&self.minilang), tok)?.accuracy
            }
            TaskKind::Mcq => mcq_accuracy(model, mask, &self.mcq, tok)?.accuracy,
            TaskKind::Probe => arithmetic_probe(baseline, model, mask, &self.probe, tok)?.top1_accuracy,
        })
    }

    pub fn score_all(
        &self,
        tasks: &[TaskKind],
        baseline: &Model,
        model: &Model,
        mask: &LayerMask,
        tok: &Tokenizer,
    ) -> Result<BTreeMap<TaskKind, f64>, HarnessError> {
        tasks.iter().map(|&t| Ok((t, self.score(t, baseline, model, mask, tok)?))).collect()
    }

    pub fn syntax(&self, model: &Model, mask: &LayerMask, tok: &Tokenizer) -> Result<SyntaxHistogram, HarnessError> {
        Ok(syntax_distribution(model, mask, &self.minilang_tasks, &eval_params(&self.minilang), tok)?)
    }

    /// Greedy-pruning benchmark: generative accuracy on `tasks` under a candidate mask.
    pub fn benchmark<'a>(
        tasks: &'a GenTasks,
        model: &'a Model,
        tok: &'a Tokenizer,
    ) -> impl Fn(&LayerMask) -> Result<f64, PruneError> + Sync + 'a {
        move |mask| {
            generative_accuracy(model, mask, tasks, &eval_params(tasks), tok)
                .map(|s| s.accuracy)
                .map_err(|e| PruneError::Benchmark(e.to_string()))
        }
    }
}

/// Recovery training and held-out data for one seed. Ground-truth responses
/// are reference solutions written in a house style that differs from the
/// terse answers the baseline was trained on.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RecoveryCorpus {
    pub train: Vec<CorpusRecord>,
    pub heldout: Vec<CorpusRecord>,
}

pub fn ground_truth_corpus(spec: &RecoverySpec, seed: u64) -> RecoveryCorpus {
    let build = |n: usize, tag: u64| {
        let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, tag + 2));
        let mut out: Vec<CorpusRecord> = Vec::with_capacity(2 * n);
        let arith = gen_arithmetic(sub_seed(seed, tag), n);
        let code = gen_minilang_tasks(sub_seed(seed, tag + 1), n);
        for (a, c) in arith.iter().zip(&code) {
            out.push(CorpusRecord::arithmetic_annotated(a, &mut rng));
            out.push(CorpusRecord::minilang_annotated(c, &mut rng));
        }
        out
    };
    RecoveryCorpus { train: build(spec.n_train, 0x30), heldout: build(spec.n_heldout, 0x40) }
}

pub fn encode_all(records: &[CorpusRecord], tok: &Tokenizer) -> Result<Vec<TrainingRecord>, HarnessError> {
    records.iter().map(|r| Ok(r.encode(tok)?)).collect()
}

/// Rebuilds generative tasks of one kind from corpus records (`arith` or
/// `minilang`, per `meta.task`); records of other tasks are skipped.
pub fn tasks_from_records(records: &[CorpusRecord], task: TaskKind) -> Result<GenTasks, HarnessError> {
    let bad = |i: usize, what: &str| HarnessError::Config(format!("record {i}: {what}"));
    let selected = records.iter().enumerate().filter(|(_, r)| r.task() == Some(task.name()));
    let tasks = match task {
        TaskKind::Arith | TaskKind::Probe => GenTasks::Arith(
            records
                .iter()
                .enumerate()
                .filter(|(_, r)| r.task() == Some("arith"))
                .map(|(i, r)| ArithmeticExample::from_prompt(&r.prompt).ok_or_else(|| bad(i, "unparseable arithmetic prompt")))
                .collect::<Result<_, _>>()?,
        ),
        TaskKind::Minilang => GenTasks::MiniLang(
            selected
                .map(|(i, r)| {
                    let description = r
                        .prompt
                        .strip_prefix(TASK_PREFIX)
                        .and_then(|p| p.strip_suffix(TASK_SUFFIX))
                        .ok_or_else(|| bad(i, "not a minilang prompt"))?;
                    let tests = r.meta.get("tests").cloned().ok_or_else(|| bad(i, "missing tests"))?;
                    Ok(MiniLangTask {
                        description: description.to_string(),
                        reference: r.response.clone(),
                        tests: serde_json::from_value(tests).map_err(|e| bad(i, &e.to_string()))?,
                    })
                })
                .collect::<Result<_, HarnessError>>()?,
        ),
        TaskKind::Mcq => return Err(HarnessError::Config("mcq is not generative; use mcq_from_records".into())),
    };
    if tasks.is_empty() {
        return Err(HarnessError::Config(format!("no {} records", task.name())));
    }
    Ok(tasks)
}

pub fn mcq_from_records(records: &[CorpusRecord]) -> Result<Vec<MCQExample>, HarnessError> {
    let items: Vec<MCQExample> = records
        .iter()
        .enumerate()
        .filter(|(_, r)| r.task() == Some("mcq"))
        .map(|(i, r)| {
            let parsed = (|| {
                let candidates: Vec<String> = serde_json::from_value(r.meta.get("candidates")?.clone()).ok()?;
                let correct = r.meta.get("correct")?.as_u64()? as usize;
                (correct < candidates.len()).then(|| MCQExample { question: r.prompt.clone(), candidates, correct })
            })();
            parsed.ok_or_else(|| HarnessError::Config(format!("record {i}: malformed mcq meta")))
        })
        .collect::<Result<_, _>>()?;
    if items.is_empty() {
        return Err(HarnessError::Config("no mcq records".into()));
    }
    Ok(items)
}
