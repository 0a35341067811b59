//! Deterministic synthetic tasks and the character tokenizer.

mod arithmetic;
mod mcq;
mod minilang_tasks;
mod mixture;
mod tokenizer;

use std::io::{BufRead, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

pub use arithmetic::{gen_arithmetic, ArithOp, ArithmeticExample, ARITH_PREFIX, ARITH_SUFFIX};
pub use mcq::{distractors, gen_mcq, gen_mcq_k, mcq_from_arithmetic, MCQExample};
pub use minilang_tasks::{describe_expr, describe_program, gen_minilang_tasks, task_for_program, MiniLangTask, TASK_PREFIX, TASK_SUFFIX};
pub use mixture::{build_mixture, mixture_records, sub_seed, MixtureConfig, TaskShare, TrainingRecord};
pub use tokenizer::{Tokenizer, BOS, EOS, PAD};

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("character {ch:?} at {pos} is not in the alphabet")]
    UnknownChar { ch: char, pos: usize },
    #[error("token {0} is a special token")]
    SpecialToken(usize),
    #[error("mixture is empty")]
    EmptyMixture,
    #[error("invalid mixture config: {0}")]
    Config(String),
    #[error("malformed corpus record on line {line}: {message}")]
    Record { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One JSONL corpus line: `{"prompt": .., "response": .., "meta": {..}}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusRecord {
    pub prompt: String,
    pub response: String,
    #[serde(default)]
    pub meta: serde_json::Value,
}

impl CorpusRecord {
    pub fn arithmetic(ex: &ArithmeticExample) -> Self {
        Self {
            prompt: ex.prompt(),
            response: ex.response(),
            meta: json!({"task": "arith", "expr": ex.expr(), "answer": ex.answer}),
        }
    }

    /// Same prompt, reference-style wording for the answer.
    pub fn arithmetic_annotated(ex: &ArithmeticExample, rng: &mut impl Rng) -> Self {
        let mut r = Self::arithmetic(ex);
        r.response = ex.annotated_response(rng);
        r
    }

    pub fn minilang(task: &MiniLangTask) -> Self {
        Self {
            prompt: task.prompt(),
            response: task.reference.clone(),
            meta: json!({"task": "minilang", "tests": task.tests}),
        }
    }

    pub fn minilang_annotated(task: &MiniLangTask, rng: &mut impl Rng) -> Self {
        let mut r = Self::minilang(task);
        r.response = task.annotated_response(rng);
        r
    }

    pub fn mcq(item: &MCQExample) -> Self {
        Self {
            prompt: item.question.clone(),
            response: item.candidates[item.correct].clone(),
            meta: json!({"task": "mcq", "candidates": item.candidates, "correct": item.correct}),
        }
    }

    pub fn task(&self) -> Option<&str> {
        self.meta.get("task").and_then(|t| t.as_str())
    }

    pub fn encode(&self, tok: &Tokenizer) -> Result<TrainingRecord, CorpusError> {
        TrainingRecord::encode(tok, &self.prompt, &self.response)
    }
}

pub fn write_jsonl<T: Serialize>(out: &mut impl Write, records: &[T]) -> Result<(), CorpusError> {
    for r in records {
        serde_json::to_writer(&mut *out, r).map_err(std::io::Error::from)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(input: impl BufRead) -> Result<Vec<T>, CorpusError> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| CorpusError::Record { line: i + 1, message: e.to_string() })?);
    }
    Ok(out)
}
