//! Oracle comparisons shared by the per-module tests and the acceptance target.
//! Each returns a one-line summary or the first disagreement.
#![allow(dead_code)]

use std::collections::BTreeMap;

use prunelab::corpora::gen_minilang_tasks;
use prunelab::diagnostics::{bleu4, rep4, self_bleu4};
use prunelab::harness::{mean_table, retention_table, CellResult, RecoveryMethod, SeedBaseline, TaskKind};
use prunelab::minilang::{classify, lex, SyntaxOutcome, TestCase};
use prunelab::model::{LayerMask, Model, ModelConfig, PosScheme};
use prunelab::pruning::{bi_scores, greedy_iterative, single_layer_sweep, PruneError, Strategy, TraceEntry};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::oracle::{bleu4_oracle, classify_oracle, cosine, parens_balanced, rep4_oracle};
use super::{naive_hidden, naive_logits, rng, roughen};

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * (1.0 + a.abs().max(b.abs()))
}

/// Token sequences with planted repetition so that both repeated and fresh
/// 4-grams are common.
pub fn repetitive_sequence(r: &mut ChaCha8Rng) -> Vec<usize> {
    let len = r.gen_range(0..40);
    let vocab = r.gen_range(2..12);
    let mut s: Vec<usize> = Vec::with_capacity(len);
    while s.len() < len {
        if s.len() >= 4 && r.gen_bool(0.4) {
            let start = r.gen_range(0..s.len() - 3);
            let span = r.gen_range(1..=(s.len() - start).min(8));
            let copy = s[start..start + span].to_vec();
            s.extend(copy);
        } else {
            s.push(r.gen_range(0..vocab));
        }
    }
    s.truncate(len);
    s
}

pub fn rep4_agreement(n: usize, seed: u64) -> Result<String, String> {
    let mut r = rng(seed);
    let exact = rep4(&[vec![7; 10]]).map_err(|e| e.to_string())?;
    if exact != 6.0 / 7.0 {
        return Err(format!("rep4 of ten identical tokens is {exact}, not 6/7"));
    }
    let mut checked = 0;
    while checked < n {
        let k = r.gen_range(1..5);
        let group: Vec<Vec<usize>> = (0..k).map(|_| repetitive_sequence(&mut r)).collect();
        let eligible: Vec<f64> = group.iter().filter(|s| s.len() >= 4).map(|s| rep4_oracle(s)).collect();
        let got = rep4(&group);
        match (eligible.is_empty(), got) {
            (true, Err(_)) => {}
            (true, Ok(v)) => return Err(format!("rep4 {group:?} = {v}, expected an error")),
            (false, Err(e)) => return Err(format!("rep4 {group:?}: {e}")),
            (false, Ok(v)) => {
                let want = eligible.iter().sum::<f64>() / eligible.len() as f64;
                if !close(v, want, 1e-12) {
                    return Err(format!("rep4 {group:?} = {v}, oracle {want}"));
                }
            }
        }
        checked += 1;
    }
    Ok(format!("{checked} groups agree; rep4(10 identical) = 6/7"))
}

pub fn self_bleu_agreement(n: usize, seed: u64) -> Result<String, String> {
    let mut r = rng(seed);
    for _ in 0..n {
        let k = r.gen_range(2..6);
        let group: Vec<Vec<usize>> = (0..k).map(|_| repetitive_sequence(&mut r)).collect();
        let mut want = 0.0;
        for i in 0..k {
            let refs: Vec<&[usize]> = (0..k).filter(|&j| j != i).map(|j| group[j].as_slice()).collect();
            let single = bleu4_oracle(&group[i], &refs);
            let got = bleu4(&group[i], &refs);
            if !close(got, single, 1e-12) {
                return Err(format!("bleu4 {:?} vs {refs:?}: {got}, oracle {single}", group[i]));
            }
            want += single;
        }
        want /= k as f64;
        let got = self_bleu4(&group).map_err(|e| e.to_string())?;
        if !close(got, want, 1e-12) {
            return Err(format!("self-BLEU {group:?} = {got}, oracle {want}"));
        }
    }
    Ok(format!("{n} groups agree"))
}

fn small_config(r: &mut ChaCha8Rng) -> ModelConfig {
    let n_heads = r.gen_range(1..3);
    ModelConfig {
        n_layers: r.gen_range(2..4),
        d_model: 4 * n_heads,
        n_heads,
        d_ff: r.gen_range(4..12),
        vocab_size: r.gen_range(16..20),
        max_seq: 64,
        pos_scheme: PosScheme::Learned,
        tie_embeddings: r.gen_bool(0.5),
        seed: r.gen(),
    }
}

pub fn bi_agreement(n: usize, seed: u64) -> Result<String, String> {
    let mut r = rng(seed);
    for inst in 0..n {
        let cfg = small_config(&mut r);
        let mut model = Model::init(cfg.clone()).map_err(|e| e.to_string())?;
        roughen(&mut model, &mut r);
        let calib: Vec<Vec<usize>> = (0..r.gen_range(1..4))
            .map(|_| (0..r.gen_range(1..10)).map(|_| r.gen_range(0..cfg.vocab_size)).collect())
            .collect();
        let got = bi_scores(&model, &calib).map_err(|e| e.to_string())?;
        let d = cfg.d_model;
        let mut want = Vec::new();
        let states: Vec<Vec<Vec<f64>>> = calib.iter().map(|s| naive_hidden(&model, s)).collect();
        for l in 0..cfg.n_layers {
            let (mut sum, mut count) = (0.0, 0usize);
            for st in &states {
                for (a, b) in st[l].chunks(d).zip(st[l + 1].chunks(d)) {
                    sum += cosine(a, b);
                    count += 1;
                }
            }
            want.push(1.0 - sum / count as f64);
        }
        for (l, (g, w)) in got.0.iter().zip(&want).enumerate() {
            if !close(*g, *w, 1e-9) {
                return Err(format!("instance {inst} layer {l}: BI {g}, oracle {w}"));
            }
        }
    }
    Ok(format!("{n} models agree"))
}

fn random_cell(r: &mut ChaCha8Rng, strategy: Strategy, ratio: f64, recovery: RecoveryMethod) -> CellResult {
    CellResult {
        key: String::new(),
        seed: 0,
        strategy,
        ratio,
        removed: Vec::new(),
        recovery,
        scores: TaskKind::ALL.iter().map(|&t| (t, r.gen_range(0.0..1.0))).collect(),
        syntax: None,
        run: None,
        checkpoint: None,
    }
}

/// Per-seed rows are raw / baseline (rows with a zero baseline dropped) and
/// the averaged table is mean raw over mean baseline.
pub fn retention_agreement(n: usize, seed: u64) -> Result<String, String> {
    let mut r = rng(seed);
    let strategies = [Strategy::Reverse, Strategy::Bi, Strategy::Iterative];
    let recoveries = [RecoveryMethod::None, RecoveryMethod::SftGt, RecoveryMethod::SftSgr];
    let mut rows_checked = 0;
    for inst in 0..n {
        let seeds = r.gen_range(1..4);
        let mut cell_keys: Vec<(Strategy, f64, RecoveryMethod)> = Vec::new();
        for _ in 0..r.gen_range(1..4) {
            let k = (*strategies.choose(&mut r).unwrap(), [0.125, 0.25, 0.5][r.gen_range(0..3)], *recoveries.choose(&mut r).unwrap());
            if !cell_keys.contains(&k) {
                cell_keys.push(k);
            }
        }
        let mut per_seed = BTreeMap::new();
        let mut expect: BTreeMap<(String, String, u64, String), (f64, f64)> = BTreeMap::new();
        for s in 0..seeds {
            let base = SeedBaseline {
                fingerprint: String::new(),
                scores: TaskKind::ALL
                    .iter()
                    .map(|&t| (t, if r.gen_bool(0.15) { 0.0 } else { r.gen_range(0.05..1.0) }))
                    .collect(),
                syntax: None,
            };
            let cells: Vec<CellResult> = cell_keys.iter().map(|&(st, ra, re)| random_cell(&mut r, st, ra, re)).collect();
            let refs: Vec<&CellResult> = cells.iter().collect();
            let table = retention_table(&TaskKind::ALL, &refs, &base);
            let mut want_rows = 0;
            for c in &cells {
                for t in TaskKind::ALL {
                    let b = base.scores[&t];
                    let raw = c.scores[&t];
                    let found = table.find(t.name(), c.strategy.name(), c.ratio, c.recovery.name());
                    if b == 0.0 {
                        if found.is_some() {
                            return Err(format!("instance {inst}: row kept for a zero baseline"));
                        }
                        continue;
                    }
                    want_rows += 1;
                    let row = found.ok_or_else(|| format!("instance {inst}: missing row {}", t.name()))?;
                    if !close(row.retention, raw / b, 1e-12) || row.raw != raw || row.baseline != b {
                        return Err(format!("instance {inst}: row {row:?}, oracle {}", raw / b));
                    }
                    let e = expect
                        .entry((t.name().into(), c.strategy.name().into(), c.ratio.to_bits(), c.recovery.name().into()))
                        .or_insert((0.0, 0.0));
                    e.0 += raw;
                    e.1 += b;
                    rows_checked += 1;
                }
            }
            if table.rows.len() != want_rows {
                return Err(format!("instance {inst}: {} rows, expected {want_rows}", table.rows.len()));
            }
            per_seed.insert(s as u64, table);
        }
        let mean = mean_table(&per_seed);
        if mean.rows.len() != expect.len() {
            return Err(format!("instance {inst}: mean table has {} rows, expected {}", mean.rows.len(), expect.len()));
        }
        for ((task, st, ratio, rec), (raw, b)) in &expect {
            let row = mean
                .find(task, st, f64::from_bits(*ratio), rec)
                .ok_or_else(|| format!("instance {inst}: mean row missing"))?;
            if !close(row.retention, raw / b, 1e-12) {
                return Err(format!("instance {inst}: mean retention {}, oracle {}", row.retention, raw / b));
            }
        }
    }
    Ok(format!("{n} tables, {rows_checked} rows agree"))
}

const FUZZ_CHARS: &[char] = &[
    '(', ')', '(', ')', '+', '-', '*', ';', '=', ' ', '\n', 'a', 'b', 'c', 'x', 't', '0', '1', '7', '`', '#', '.',
];

/// A model-output-like string: a reference program with random edits, a
/// truncation, a fence, or plain noise.
pub fn fuzz_program(r: &mut ChaCha8Rng, refs: &[String]) -> String {
    if r.gen_bool(0.1) {
        return (0..r.gen_range(0..30)).map(|_| *FUZZ_CHARS.choose(r).unwrap()).collect();
    }
    let mut chars: Vec<char> = refs.choose(r).unwrap().chars().collect();
    for _ in 0..r.gen_range(0..4) {
        match r.gen_range(0..6) {
            0 if !chars.is_empty() => {
                let i = r.gen_range(0..chars.len());
                chars.remove(i);
            }
            1 => {
                let i = r.gen_range(0..=chars.len());
                chars.insert(i, *FUZZ_CHARS.choose(r).unwrap());
            }
            2 if !chars.is_empty() => {
                let i = r.gen_range(0..chars.len());
                chars[i] = *FUZZ_CHARS.choose(r).unwrap();
            }
            3 => {
                let i = r.gen_range(0..=chars.len());
                chars.truncate(i);
            }
            4 => {
                let i = r.gen_range(0..=chars.len());
                chars.insert(i, if r.gen_bool(0.5) { '(' } else { ')' });
            }
            _ => {}
        }
    }
    let body: String = chars.into_iter().collect();
    match r.gen_range(0..8) {
        0 => format!("```minilang\n{body}\n```"),
        1 => format!("```\n{body}"),
        _ => body,
    }
}

pub struct FuzzSummary {
    pub histogram: BTreeMap<SyntaxOutcome, usize>,
    pub depth_checked: usize,
}

/// Classifies `n` fuzzed outputs, checking each against the independent
/// classifier and, when the text lexes, the paren depth counter.
pub fn fuzz_minilang(n: usize, seed: u64) -> Result<FuzzSummary, String> {
    let mut r = rng(seed);
    let tasks = gen_minilang_tasks(seed, 200);
    let refs: Vec<String> = tasks.iter().map(|t| t.reference.clone()).collect();
    let mut histogram = BTreeMap::new();
    let mut depth_checked = 0;
    for i in 0..n {
        let task = &tasks[i % tasks.len()];
        let text = fuzz_program(&mut r, &refs);
        let got = classify(&text, &task.tests);
        let want = classify_oracle(&text, &task.tests);
        if got != want {
            return Err(format!("{text:?}: classify {got:?}, oracle {want:?}"));
        }
        let hits = SyntaxOutcome::ALL.iter().filter(|&&o| o == got).count();
        if hits != 1 {
            return Err(format!("{text:?} maps to {hits} outcomes"));
        }
        *histogram.entry(got).or_insert(0) += 1;
        if let Some(code) = prunelab::minilang::strip_code_fence(&text) {
            if lex(code).is_ok() {
                let parens: Vec<char> = code.chars().filter(|c| *c == '(' || *c == ')').collect();
                let unbalanced = !parens_balanced(&parens);
                if unbalanced != (got == SyntaxOutcome::UnbalancedParen) {
                    return Err(format!("{text:?}: depth counter says unbalanced={unbalanced}, got {got:?}"));
                }
                depth_checked += 1;
            }
        }
    }
    Ok(FuzzSummary { histogram, depth_checked })
}

pub fn classify_agreement(n: usize, seed: u64) -> Result<String, String> {
    let s = fuzz_minilang(n, seed)?;
    Ok(format!("{n} programs agree, outcomes {:?}", s.histogram))
}

/// Mean next-token log-probability of `seqs` from the reference forward on
/// the model with `skip` removed.
fn naive_score(model: &Model, seqs: &[Vec<usize>], skip: &[usize]) -> f64 {
    let v = model.config.vocab_size;
    let (mut total, mut count) = (0.0, 0usize);
    for s in seqs {
        let logits = naive_logits(model, s, skip);
        for t in 0..s.len() - 1 {
            let row = &logits[t * v..(t + 1) * v];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|x| (x - mx).exp()).sum();
            total += row[s[t + 1]] - mx - z.ln();
            count += 1;
        }
    }
    total / count as f64
}

fn library_score(model: &Model, seqs: &[Vec<usize>], mask: &LayerMask) -> Result<f64, PruneError> {
    let mut total = 0.0;
    let mut count = 0;
    for s in seqs {
        total += model.sequence_logprob(s, mask, 1..s.len())?;
        count += s.len() - 1;
    }
    Ok(total / count as f64)
}

/// Greedy pruning of an L=5 model against an exhaustive per-round search
/// with the reference forward on physically reduced layer sets.
pub fn greedy_agreement(seed: u64) -> Result<String, String> {
    let mut r = rng(seed);
    let cfg = ModelConfig {
        n_layers: 5,
        d_model: 16,
        n_heads: 2,
        d_ff: 32,
        vocab_size: 20,
        max_seq: 64,
        pos_scheme: PosScheme::Learned,
        tie_embeddings: false,
        seed,
    };
    let mut model = Model::init(cfg.clone()).map_err(|e| e.to_string())?;
    roughen(&mut model, &mut r);
    let seqs: Vec<Vec<usize>> =
        (0..4).map(|_| (0..r.gen_range(6..16)).map(|_| r.gen_range(0..cfg.vocab_size)).collect()).collect();
    let bench = |m: &LayerMask| library_score(&model, &seqs, m);

    let plan = greedy_iterative(&model, bench, 2, false).map_err(|e| e.to_string())?;
    let mut chosen: Vec<usize> = Vec::new();
    for (round, entry) in plan.trace.iter().enumerate() {
        let TraceEntry::Round { chosen: got, score, candidates, .. } = entry else {
            return Err("greedy trace holds a non-round entry".into());
        };
        let mut best: Option<(usize, f64)> = None;
        for l in (0..5).filter(|l| !chosen.contains(l)) {
            let mut skip = chosen.clone();
            skip.push(l);
            let s = naive_score(&model, &seqs, &skip);
            let lib = candidates.iter().find(|c| c.layer == l).ok_or(format!("round {round}: layer {l} not scored"))?;
            if !close(lib.score, s, 1e-9) {
                return Err(format!("round {round} layer {l}: score {}, oracle {s}", lib.score));
            }
            if best.map_or(true, |(_, b)| s > b) {
                best = Some((l, s));
            }
        }
        let (want, want_score) = best.unwrap();
        if *got != want || !close(*score, want_score, 1e-9) {
            return Err(format!("round {round}: greedy chose {got}, exhaustive argmax {want}"));
        }
        chosen.push(want);
    }

    let one = greedy_iterative(&model, bench, 1, false).map_err(|e| e.to_string())?;
    let all: Vec<usize> = (0..5).collect();
    let sweep = single_layer_sweep(&model, bench, Some(&all)).map_err(|e| e.to_string())?;
    if one.removed.to_vec() != vec![sweep.argmax().unwrap()] {
        return Err(format!("N=1 removed {:?}, sweep argmax {:?}", one.removed.to_vec(), sweep.argmax()));
    }
    Ok(format!("trace {chosen:?} matches the exhaustive search; N=1 = sweep argmax"))
}

pub fn tests_for(bindings: &[(&str, i64)], expected: i64) -> Vec<TestCase> {
    vec![TestCase { bindings: bindings.iter().map(|(k, v)| (k.to_string(), *v)).collect(), expected }]
}

/// A matrix small enough to run in seconds: 4-layer d16 model, a short
/// baseline run, and a few recovery steps.
pub fn tiny_experiment(out_dir: &std::path::Path) -> prunelab::harness::ExperimentConfig {
    use prunelab::corpora::{MixtureConfig, TaskShare};
    use prunelab::harness::{BaselineSpec, EvalSpec, ExperimentConfig, RecoverySpec};
    use prunelab::recovery::{LowRankHyper, SgrParams, TrainHyper};
    let vocab = prunelab::corpora::Tokenizer::new().vocab_size();
    let model = ModelConfig {
        n_layers: 4,
        d_model: 16,
        n_heads: 2,
        d_ff: 32,
        vocab_size: vocab,
        max_seq: 128,
        pos_scheme: PosScheme::Learned,
        tie_embeddings: true,
        seed: 0,
    };
    let hyper = |steps| TrainHyper { steps, batch_size: 8, lr: 3e-3, warmup: 2, eval_every: 2, clip_norm: 1.0, seed: 0 };
    ExperimentConfig {
        baseline: BaselineSpec {
            model,
            mixture: MixtureConfig {
                arith: TaskShare::new(64, 1.0),
                minilang: TaskShare::new(32, 1.0),
                mcq: TaskShare::new(0, 0.0),
                seed: 1,
            },
            hyper: hyper(12),
        },
        baseline_ckpt: None,
        strategies: vec![Strategy::Reverse, Strategy::Bi, Strategy::Iterative],
        ratios: vec![0.0, 0.25],
        recoveries: vec![RecoveryMethod::None, RecoveryMethod::SftGt, RecoveryMethod::SftSgr, RecoveryMethod::LowrankSgr],
        tasks: TaskKind::ALL.to_vec(),
        seeds: vec![1, 2],
        protect_last: false,
        eval: EvalSpec { n_arith: 6, n_minilang: 3, n_mcq: 6, n_probe: 6, n_calib: 4, n_bi: 3 },
        recovery: RecoverySpec {
            hyper: hyper(4),
            n_train: 4,
            n_heldout: 3,
            sgr: SgrParams { temperature: 0.7, max_new_tokens: 16, seed: 0, k: 1 },
            lowrank: LowRankHyper { rank: 2, alpha: 4.0 },
            lowrank_lr: 3e-3,
        },
        out_dir: out_dir.to_path_buf(),
        cache_dir: None,
    }
}

/// Two independent runs of the same configuration must write identical CSVs.
pub fn matrix_determinism(root: &std::path::Path) -> Result<String, String> {
    use prunelab::harness::run_matrix;
    let tok = prunelab::corpora::Tokenizer::new();
    let mut csvs = Vec::new();
    for run in ["a", "b"] {
        let cfg = tiny_experiment(&root.join(run));
        let report = run_matrix(&cfg, &tok).map_err(|e| e.to_string())?;
        if !report.ok() {
            return Err(format!("run {run} failed: {:?}", report.failures));
        }
        let mut files = vec![std::fs::read(cfg.out_dir.join("retention.csv")).map_err(|e| e.to_string())?];
        for s in &cfg.seeds {
            files.push(std::fs::read(cfg.out_dir.join(format!("retention_seed{s}.csv"))).map_err(|e| e.to_string())?);
        }
        csvs.push(files);
    }
    if csvs[0] != csvs[1] {
        return Err("retention CSVs differ between identical runs".into());
    }
    Ok(format!("{} CSV files byte-identical ({} bytes)", csvs[0].len(), csvs[0].iter().map(Vec::len).sum::<usize>()))
}
