use serde::{Deserialize, Serialize};

use super::DiagError;
use crate::corpora::{ArithmeticExample, MCQExample, MiniLangTask, Tokenizer, BOS, EOS};
use crate::minilang::{classify, SyntaxOutcome};
use crate::model::{GenerationParams, LayerMask, Model};
use crate::par::par_map;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalScore {
    pub task: String,
    pub accuracy: f64,
    pub n: usize,
}

impl EvalScore {
    fn from_hits(task: &str, hits: impl Iterator<Item = bool>) -> Self {
        let (mut n, mut k) = (0usize, 0usize);
        for h in hits {
            n += 1;
            k += h as usize;
        }
        Self { task: task.to_string(), accuracy: if n == 0 { 0.0 } else { k as f64 / n as f64 }, n }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArithmeticProbeResult {
    pub n: usize,
    /// Mean of `logp_pruned − logp_baseline` on the correct digit.
    pub mean_delta_logprob: f64,
    pub top1_accuracy: f64,
    pub baseline_top1_accuracy: f64,
}

/// Default probe size.
pub const PROBE_N: usize = 200;

/// `BOS` followed by the prompt characters.
pub fn prompt_tokens(tok: &Tokenizer, prompt: &str) -> Result<Vec<usize>, DiagError> {
    let mut t = vec![BOS];
    t.extend(tok.tokenize(prompt)?);
    Ok(t)
}

/// First-token probe over the digits 0–9: log-probability change on the
/// correct digit and top-1 accuracy, pruned (`model` + `mask`) versus `baseline`.
pub fn arithmetic_probe(
    baseline: &Model,
    model: &Model,
    mask: &LayerMask,
    probes: &[ArithmeticExample],
    tok: &Tokenizer,
) -> Result<ArithmeticProbeResult, DiagError> {
    if probes.is_empty() {
        return Err(DiagError::NoEligible("empty probe set".into()));
    }
    let digits = tok.digit_ids();
    let empty = LayerMask::empty();
    let per_item = par_map(probes, |ex| -> Result<(f64, bool, bool), DiagError> {
        if !(0..=9).contains(&ex.answer) {
            return Err(DiagError::Probe(format!("answer {} is not a single digit", ex.answer)));
        }
        let prompt = prompt_tokens(tok, &ex.prompt())?;
        let target = tok.digit(ex.answer as u32);
        let base = baseline.next_token_distribution(&prompt, &empty, Some(&digits))?;
        let pruned = model.next_token_distribution(&prompt, mask, Some(&digits))?;
        let delta = pruned.logprob(target).expect("digit in set") - base.logprob(target).expect("digit in set");
        Ok((delta, pruned.argmax() == target, base.argmax() == target))
    });
    let (mut delta, mut top1, mut base_top1) = (0.0, 0usize, 0usize);
    for r in per_item {
        let (d, hit, base_hit) = r?;
        delta += d;
        top1 += hit as usize;
        base_top1 += base_hit as usize;
    }
    let n = probes.len();
    Ok(ArithmeticProbeResult {
        n,
        mean_delta_logprob: delta / n as f64,
        top1_accuracy: top1 as f64 / n as f64,
        baseline_top1_accuracy: base_top1 as f64 / n as f64,
    })
}

/// Index of the candidate (followed by EOS) with the highest sequence log-probability.
pub fn mcq_predict(model: &Model, mask: &LayerMask, item: &MCQExample, tok: &Tokenizer) -> Result<usize, DiagError> {
    let prompt = prompt_tokens(tok, &item.question)?;
    let mut best: Option<(usize, f64)> = None;
    for (i, c) in item.candidates.iter().enumerate() {
        let mut seq = prompt.clone();
        seq.extend(tok.tokenize(c)?);
        seq.push(EOS);
        let lp = model.sequence_logprob(&seq, mask, prompt.len()..seq.len())?;
        if best.map_or(true, |(_, b)| lp > b) {
            best = Some((i, lp));
        }
    }
    best.map(|b| b.0).ok_or_else(|| DiagError::Probe("item without candidates".into()))
}

pub fn mcq_accuracy(model: &Model, mask: &LayerMask, items: &[MCQExample], tok: &Tokenizer) -> Result<EvalScore, DiagError> {
    if let Some(item) = items.iter().find(|i| i.candidates.len() < 2) {
        return Err(DiagError::Probe(format!("MCQ item with {} candidates", item.candidates.len())));
    }
    let preds: Result<Vec<bool>, DiagError> =
        par_map(items, |it| mcq_predict(model, mask, it, tok).map(|p| p == it.correct)).into_iter().collect();
    Ok(EvalScore::from_hits("mcq", preds?.into_iter()))
}

/// Tasks scored by generating a response.
#[derive(Clone, Debug, PartialEq)]
pub enum GenTasks {
    Arith(Vec<ArithmeticExample>),
    MiniLang(Vec<MiniLangTask>),
}

impl GenTasks {
    pub fn name(&self) -> &'static str {
        match self {
            GenTasks::Arith(_) => "arith",
            GenTasks::MiniLang(_) => "minilang",
        }
    }

    pub fn len(&self) -> usize {
        match self {
            GenTasks::Arith(v) => v.len(),
            GenTasks::MiniLang(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn prompts(&self) -> Vec<String> {
        match self {
            GenTasks::Arith(v) => v.iter().map(|e| e.prompt()).collect(),
            GenTasks::MiniLang(v) => v.iter().map(|t| t.prompt()).collect(),
        }
    }
}

/// Generation settings for task evaluation: greedy, stop at EOS.
pub fn eval_params(tasks: &GenTasks) -> GenerationParams {
    let max = match tasks {
        GenTasks::Arith(_) => 8,
        GenTasks::MiniLang(_) => 64,
    };
    GenerationParams::greedy(max, Some(EOS))
}

/// Decoded completions, one per prompt. Item `i` samples with seed `params.seed + i`.
pub fn generate_all(
    model: &Model,
    mask: &LayerMask,
    prompts: &[String],
    params: &GenerationParams,
    tok: &Tokenizer,
) -> Result<Vec<Vec<usize>>, DiagError> {
    let indexed: Vec<(usize, &String)> = prompts.iter().enumerate().collect();
    par_map(&indexed, |(i, p)| {
        let prompt = prompt_tokens(tok, p)?;
        let mut params = params.clone();
        params.seed = params.seed.wrapping_add(*i as u64);
        Ok(model.generate(&prompt, mask, &params)?)
    })
    .into_iter()
    .collect()
}

/// Exact match after "Answer:" for arithmetic; all tests passing for minilang.
pub fn grade(tasks: &GenTasks, i: usize, text: &str) -> bool {
    match tasks {
        GenTasks::Arith(v) => text.trim() == v[i].answer.to_string(),
        GenTasks::MiniLang(v) => classify(text, &v[i].tests) == SyntaxOutcome::Pass,
    }
}

pub fn generative_accuracy(
    model: &Model,
    mask: &LayerMask,
    tasks: &GenTasks,
    params: &GenerationParams,
    tok: &Tokenizer,
) -> Result<EvalScore, DiagError> {
    let outs = generate_all(model, mask, &tasks.prompts(), params, tok)?;
    Ok(EvalScore::from_hits(
        tasks.name(),
        outs.iter().enumerate().map(|(i, o)| grade(tasks, i, &tok.decode_lossy(o))),
    ))
}

/// Counts of each [`SyntaxOutcome`].
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntaxHistogram {
    pub pass: usize,
    pub assertion_fail: usize,
    pub unbalanced_paren: usize,
    pub undefined_variable: usize,
    pub other_syntax: usize,
}

impl SyntaxHistogram {
    pub fn add(&mut self, o: SyntaxOutcome) {
        *self.slot(o) += 1;
    }

    fn slot(&mut self, o: SyntaxOutcome) -> &mut usize {
        match o {
            SyntaxOutcome::Pass => &mut self.pass,
            SyntaxOutcome::AssertionFail => &mut self.assertion_fail,
            SyntaxOutcome::UnbalancedParen => &mut self.unbalanced_paren,
            SyntaxOutcome::UndefinedVariable => &mut self.undefined_variable,
            SyntaxOutcome::OtherSyntax => &mut self.other_syntax,
        }
    }

    pub fn get(&self, o: SyntaxOutcome) -> usize {
        let mut c = self.clone();
        *c.slot(o)
    }

    pub fn total(&self) -> usize {
        self.pass + self.assertion_fail + self.unbalanced_paren + self.undefined_variable + self.other_syntax
    }

    /// Fraction per outcome, in [`SyntaxOutcome::ALL`] order.
    pub fn fractions(&self) -> Vec<(SyntaxOutcome, f64)> {
        let t = self.total().max(1) as f64;
        SyntaxOutcome::ALL.iter().map(|&o| (o, self.get(o) as f64 / t)).collect()
    }
}

impl FromIterator<SyntaxOutcome> for SyntaxHistogram {
    fn from_iter<I: IntoIterator<Item = SyntaxOutcome>>(iter: I) -> Self {
        let mut h = Self::default();
        iter.into_iter().for_each(|o| h.add(o));
        h
    }
}

pub fn syntax_outcomes(
    model: &Model,
    mask: &LayerMask,
    tasks: &[MiniLangTask],
    params: &GenerationParams,
    tok: &Tokenizer,
) -> Result<Vec<SyntaxOutcome>, DiagError> {
    let prompts: Vec<String> = tasks.iter().map(|t| t.prompt()).collect();
    let outs = generate_all(model, mask, &prompts, params, tok)?;
    Ok(outs.iter().zip(tasks).map(|(o, t)| classify(&tok.decode_lossy(o), &t.tests)).collect())
}

pub fn syntax_distribution(
    model: &Model,
    mask: &LayerMask,
    tasks: &[MiniLangTask],
    params: &GenerationParams,
    tok: &Tokenizer,
) -> Result<SyntaxHistogram, DiagError> {
    Ok(syntax_outcomes(model, mask, tasks, params, tok)?.into_iter().collect())
}
