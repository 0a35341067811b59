//! Single-layer sweep plot, post-recovery analysis and the upper-bound recipe.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::baseline::content_key;
use super::config::{layers_for_ratio, ExperimentConfig, RecoveryMethod, TaskKind};
use super::matrix::{load_cell_model, load_report, recovery_hyper, sgr_params, RetentionTable, SeedContext};
use super::suite::{encode_all, EvalSuite};
use super::HarnessError;
use crate::corpora::{gen_arithmetic, gen_minilang_tasks, sub_seed, CorpusRecord, Tokenizer};
use crate::diagnostics::{eval_params, GenTasks, SyntaxHistogram};
use crate::minilang::SyntaxOutcome;
use crate::model::{LayerMask, Model};
use crate::pruning::{greedy_iterative, single_layer_sweep, PruneError, SweepResult};
use crate::recovery::{generate_sgr, sft, SgrParams, TrainingRun};

/// Formatting used for every number shown in plots.
pub fn fmt_value(v: f64) -> String {
    format!("{v:.6}")
}

/// One named line of `(x, y)` points.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Standalone SVG line chart, one `<polyline>` per series. Each polyline
/// carries its raw values in `data-x` / `data-y`.
pub fn line_chart_svg(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    let (w, h, pad) = (640.0, 400.0, 50.0);
    let xs = series.iter().flat_map(|s| s.points.iter().map(|p| p.0));
    let (x_min, x_max) = xs.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| (a.min(x), b.max(x)));
    let ys = series.iter().flat_map(|s| s.points.iter().map(|p| p.1));
    let y_max = ys.fold(1.0f64, f64::max);
    let (x_min, x_max) = if x_min.is_finite() && x_max > x_min { (x_min, x_max) } else { (0.0, 1.0) };
    let sx = |x: f64| pad + (x - x_min) / (x_max - x_min) * (w - 2.0 * pad);
    let sy = |y: f64| h - pad - y / y_max * (h - 2.0 * pad);
    let mut out = String::new();
    let _ = writeln!(out, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#);
    let _ = writeln!(out, r#"<title>{}</title>"#, escape(title));
    let _ = writeln!(out, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        out,
        r#"<line x1="{pad}" y1="{}" x2="{}" y2="{}" stroke="black"/>"#,
        h - pad,
        w - pad,
        h - pad
    );
    let _ = writeln!(out, r#"<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{}" stroke="black"/>"#, h - pad);
    let _ = writeln!(out, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, w / 2.0, h - 10.0, escape(x_label));
    let _ = writeln!(out, r#"<text x="15" y="{}" transform="rotate(-90 15 {})" text-anchor="middle">{}</text>"#, h / 2.0, h / 2.0, escape(y_label));
    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = s.points.iter().map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
        let dx: Vec<String> = s.points.iter().map(|p| fmt_value(p.0)).collect();
        let dy: Vec<String> = s.points.iter().map(|p| fmt_value(p.1)).collect();
        let _ = writeln!(
            out,
            r#"<polyline fill="none" stroke="{color}" stroke-width="2" data-name="{}" data-x="{}" data-y="{}" points="{}"/>"#,
            escape(&s.name),
            dx.join(" "),
            dy.join(" "),
            pts.join(" ")
        );
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{}" fill="{color}">{}</text>"#,
            w - pad - 100.0,
            pad + 16.0 * i as f64,
            escape(&s.name)
        );
    }
    out.push_str("</svg>\n");
    out
}

/// Retention against pruning ratio for one strategy and recovery, one line per task.
pub fn retention_svg(table: &RetentionTable, strategy: &str, recovery: &str) -> String {
    let mut by_task: BTreeMap<&str, Vec<(f64, f64)>> = BTreeMap::new();
    for r in table.rows.iter().filter(|r| r.strategy == strategy && r.recovery == recovery) {
        by_task.entry(r.task.as_str()).or_default().push((r.ratio, r.retention));
    }
    let series: Vec<Series> = by_task
        .into_iter()
        .map(|(name, mut points)| {
            points.sort_by(|a, b| a.0.total_cmp(&b.0));
            Series { name: name.to_string(), points }
        })
        .collect();
    line_chart_svg(&format!("retention: {strategy}, {recovery}"), "pruning ratio", "retention", &series)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepFigure {
    pub sweeps: BTreeMap<TaskKind, SweepResult>,
    pub svg: String,
}

/// Removes each candidate layer alone and scores every task; plots one line per task.
pub fn run_sweep_figure(
    model: &Model,
    suite: &EvalSuite,
    tasks: &[TaskKind],
    candidates: Option<&[usize]>,
    tok: &Tokenizer,
) -> Result<SweepFigure, HarnessError> {
    let mut sweeps = BTreeMap::new();
    for &t in tasks {
        let bench = |mask: &LayerMask| {
            suite.score(t, model, model, mask, tok).map_err(|e| PruneError::Benchmark(e.to_string()))
        };
        sweeps.insert(t, single_layer_sweep(model, bench, candidates)?);
    }
    let svg = sweep_svg(&sweeps);
    Ok(SweepFigure { sweeps, svg })
}

pub fn sweep_svg(sweeps: &BTreeMap<TaskKind, SweepResult>) -> String {
    let series: Vec<Series> = sweeps
        .iter()
        .map(|(t, s)| Series {
            name: t.name().into(),
            points: s.candidates.iter().zip(&s.scores).map(|(&l, &v)| (l as f64, v)).collect(),
        })
        .collect();
    line_chart_svg("Effect of removing a single layer", "removed layer", "score", &series)
}

/// Base / pruned / recovered comparison for one matrix cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecoveryBars {
    pub seed: u64,
    pub strategy: String,
    pub ratio: f64,
    pub recovery: String,
    pub removed: Vec<usize>,
    /// Arithmetic first-token top-1 for base, pruned, recovered.
    pub probe: [f64; 3],
    /// Generative arithmetic accuracy for base, pruned, recovered.
    pub arith: [f64; 3],
    /// Syntax-outcome fractions for base, pruned, recovered.
    pub syntax: [Vec<(SyntaxOutcome, f64)>; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PostRecoveryReport {
    pub bars: Vec<RecoveryBars>,
    pub svg: String,
}

/// Re-evaluates the matrix checkpoints: the unpruned baseline, the pruned
/// model without recovery, and each recovered checkpoint.
pub fn run_post_recovery_analysis(cfg: &ExperimentConfig, tok: &Tokenizer) -> Result<PostRecoveryReport, HarnessError> {
    let report = load_report(&cfg.out_dir)?;
    let mut bars = Vec::new();
    for &seed in &cfg.seeds {
        let cells: Vec<_> = report.cells.iter().filter(|c| c.seed == seed && c.recovery != RecoveryMethod::None).collect();
        if cells.is_empty() {
            continue;
        }
        let ctx = SeedContext::new(cfg, tok, seed)?;
        let empty = LayerMask::empty();
        let measure = |m: &Model, mask: &LayerMask| -> Result<(f64, f64, SyntaxHistogram), HarnessError> {
            Ok((
                ctx.suite.score(TaskKind::Probe, &ctx.baseline, m, mask, tok)?,
                ctx.suite.score(TaskKind::Arith, &ctx.baseline, m, mask, tok)?,
                ctx.suite.syntax(m, mask, tok)?,
            ))
        };
        let base = measure(&ctx.baseline, &empty)?;
        for cell in cells {
            let model = load_cell_model(&cfg.out_dir, cell)?
                .ok_or_else(|| HarnessError::Missing(format!("checkpoint for cell {}", cell.key)))?;
            let mask = LayerMask::new(cell.removed.iter().copied());
            let pruned = measure(&ctx.baseline, &mask)?;
            let rec = measure(&model, &mask)?;
            bars.push(RecoveryBars {
                seed,
                strategy: cell.strategy.name().into(),
                ratio: cell.ratio,
                recovery: cell.recovery.name().into(),
                removed: cell.removed.clone(),
                probe: [base.0, pruned.0, rec.0],
                arith: [base.1, pruned.1, rec.1],
                syntax: [base.2.fractions(), pruned.2.fractions(), rec.2.fractions()],
            });
        }
    }
    let svg = bars_svg(&bars);
    Ok(PostRecoveryReport { bars, svg })
}

/// Grouped bars (base, pruned, recovered) of probe top-1 per cell.
pub fn bars_svg(bars: &[RecoveryBars]) -> String {
    let group_w = 90.0;
    let w = 80.0 + group_w * bars.len().max(1) as f64;
    let h = 360.0;
    let colors = ["#7f7f7f", "#d62728", "#2ca02c"];
    let mut out = String::new();
    let _ = writeln!(out, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#);
    let _ = writeln!(out, "<title>Arithmetic probe top-1: base, pruned, recovered</title>");
    let _ = writeln!(out, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    for (i, b) in bars.iter().enumerate() {
        let x0 = 50.0 + group_w * i as f64;
        for (j, v) in b.probe.iter().enumerate() {
            let bh = v * 260.0;
            let _ = writeln!(
                out,
                r#"<rect x="{:.2}" y="{:.2}" width="24" height="{:.2}" fill="{}" data-value="{}"/>"#,
                x0 + 26.0 * j as f64,
                300.0 - bh,
                bh,
                colors[j],
                fmt_value(*v)
            );
        }
        let _ = writeln!(
            out,
            r#"<text x="{:.2}" y="320" font-size="10">s{} {} {} {}</text>"#,
            x0,
            b.seed,
            escape(&b.strategy),
            b.ratio,
            escape(&b.recovery)
        );
    }
    out.push_str("</svg>\n");
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UpperBoundReport {
    pub task: TaskKind,
    pub seed: u64,
    pub ratio: f64,
    pub removed: Vec<usize>,
    pub k: usize,
    pub baseline_score: f64,
    pub pruned_score: f64,
    pub recovered_score: f64,
    pub dropped_empty: usize,
    pub run: TrainingRun,
    pub key: String,
}

/// Best-case recovery: greedy pruning calibrated on the task itself, `k`
/// teacher samples per training prompt (8 by default), finetuning on that
/// task only, evaluation on the task's test split.
pub fn run_upper_bound(
    cfg: &ExperimentConfig,
    task: TaskKind,
    ratio: f64,
    seed: u64,
    k: Option<usize>,
    tok: &Tokenizer,
) -> Result<UpperBoundReport, HarnessError> {
    if !task.is_generative() {
        return Err(HarnessError::Config(format!("upper bound needs a generative task, got {}", task.name())));
    }
    let k = k.unwrap_or(8);
    let ctx = SeedContext::new(cfg, tok, seed)?;
    let test = match task {
        TaskKind::Arith => &ctx.suite.arith,
        _ => &ctx.suite.minilang,
    };
    let calib = match task {
        TaskKind::Arith => GenTasks::Arith(gen_arithmetic(sub_seed(seed, 0x90), cfg.eval.n_calib)),
        _ => GenTasks::MiniLang(gen_minilang_tasks(sub_seed(seed, 0x91), cfg.eval.n_calib)),
    };
    let n = layers_for_ratio(ctx.baseline.n_layers(), ratio);
    let plan = greedy_iterative(&ctx.baseline, EvalSuite::benchmark(&calib, &ctx.baseline, tok), n, cfg.protect_last)?;
    let mask = plan.removed.clone();
    let score = |m: &Model| -> Result<f64, HarnessError> {
        Ok(crate::diagnostics::generative_accuracy(m, &mask, test, &eval_params(test), tok)?.accuracy)
    };
    let baseline_score =
        crate::diagnostics::generative_accuracy(&ctx.baseline, &LayerMask::empty(), test, &eval_params(test), tok)?.accuracy;
    let pruned_score = score(&ctx.baseline)?;
    let prompts: Vec<CorpusRecord> = match task {
        TaskKind::Arith => gen_arithmetic(sub_seed(seed, 0x92), cfg.recovery.n_train).iter().map(CorpusRecord::arithmetic).collect(),
        _ => gen_minilang_tasks(sub_seed(seed, 0x93), cfg.recovery.n_train).iter().map(CorpusRecord::minilang).collect(),
    };
    let params = SgrParams { k, ..sgr_params(cfg, seed) };
    let data = generate_sgr(&ctx.baseline, &LayerMask::empty(), &prompts, &params, tok)?;
    let train = encode_all(&data.records, tok)?;
    let mut model = ctx.baseline.clone();
    let hyper = recovery_hyper(cfg, seed, RecoveryMethod::SftSgr);
    let mut run = sft(&mut model, &mask, &train, &hyper, &[])?;
    run.method = "upper_bound_sgr".into();
    let recovered_score = score(&model)?;
    let key = content_key(&json!({"kind": "upper_bound", "model": ctx.fingerprint, "task": task, "ratio": ratio,
        "seed": seed, "k": k, "recovery": cfg.recovery}));
    Ok(UpperBoundReport {
        task,
        seed,
        ratio,
        removed: mask.to_vec(),
        k,
        baseline_score,
        pruned_score,
        recovered_score,
        dropped_empty: data.dropped_empty,
        run,
        key,
    })
}
