use std::collections::BTreeMap;
use std::fs;
use std::io::{self, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;

use prunelab::corpora::{
    gen_arithmetic, gen_mcq, gen_minilang_tasks, mixture_records, read_jsonl, sub_seed, write_jsonl, CorpusRecord,
    Tokenizer, EOS,
};
use prunelab::diagnostics::{
    arithmetic_probe, eval_params, generate_all, generative_accuracy, mcq_accuracy, DegenerationReport, GenTasks,
};
use prunelab::harness::{
    encode_all, ground_truth_corpus, load_or_train_baseline, mcq_from_records, recovery_hyper, resolved_spec,
    retention_svg, run_matrix, run_post_recovery_analysis, run_sweep_figure, run_upper_bound, sgr_params, sweep_svg,
    tasks_from_records, train_baseline, EvalSuite, ExperimentConfig, RecoveryMethod, TaskKind,
};
use prunelab::model::{load_checkpoint, save_checkpoint, GenerationParams, LayerMask, Model};
use prunelab::pruning::{bi_scores, greedy_iterative, plan_bi, plan_reverse, BIScores, PruneError, PrunePlan};
use prunelab::recovery::{generate_sgr, lowrank_finetune, sft};

#[derive(Parser)]
#[command(name = "prunelab", version, about = "Depth pruning and recovery experiments on toy transformers")]
struct Cli {
    /// Experiment seed.
    #[arg(long, global = true, default_value_t = 1)]
    seed: u64,
    /// Output file or directory, depending on the subcommand.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Experiment config (JSON); missing fields take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum GenTask {
    Arith,
    Minilang,
    Mcq,
    Mixture,
}

#[derive(Clone, Copy, ValueEnum)]
enum StrategyArg {
    Reverse,
    Bi,
    Iterative,
}

#[derive(Clone, Copy, ValueEnum)]
enum BenchArg {
    Arith,
    Minilang,
    Mcq,
}

#[derive(Clone, Copy, ValueEnum)]
enum Metric {
    Degen,
    Arith,
    Mcq,
    Gen,
    Syntax,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    SftGt,
    SftSgr,
    LowrankSgr,
}

impl From<MethodArg> for RecoveryMethod {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::SftGt => RecoveryMethod::SftGt,
            MethodArg::SftSgr => RecoveryMethod::SftSgr,
            MethodArg::LowrankSgr => RecoveryMethod::LowrankSgr,
        }
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Write a synthetic corpus as JSONL (stdout without --out).
    Gen {
        #[arg(long, value_enum)]
        task: GenTask,
        /// Records to write; for a mixture, a cap on the configured mixture.
        #[arg(long)]
        n: Option<usize>,
    },
    /// Train the baseline described by the config; writes baseline.plab and baseline.json into --out.
    Train {
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Choose layers to remove and write the plan JSON.
    Prune {
        #[arg(long, value_enum)]
        strategy: StrategyArg,
        #[arg(long)]
        n: usize,
        /// JSONL calibration records (BI sequences or greedy benchmark items).
        #[arg(long)]
        calib: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "arith")]
        benchmark: BenchArg,
        #[arg(long)]
        protect_last: bool,
        /// Checkpoint to prune; defaults to the config's baseline for --seed.
        #[arg(long)]
        ckpt: Option<PathBuf>,
    },
    /// Score every single-layer removal; writes sweep.json and sweep.svg into --out.
    Sweep {
        #[arg(long, value_delimiter = ',', default_values = ["arith", "minilang", "mcq", "probe"])]
        tasks: Vec<TaskKind>,
        #[arg(long)]
        ckpt: Option<PathBuf>,
    },
    /// Measure a (possibly masked) model and print or write the JSON report.
    Probe {
        #[arg(long, value_enum)]
        metric: Metric,
        /// Plan JSON whose `removed` layers are skipped.
        #[arg(long)]
        mask: Option<PathBuf>,
        /// Items per evaluation set.
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// Reference model for the arithmetic probe and degeneration ratios; defaults to --ckpt unmasked.
        #[arg(long)]
        baseline: Option<PathBuf>,
    },
    /// Finetune a pruned model; writes the recovered checkpoint, run JSON and SGR corpus into --out.
    Recover {
        #[arg(long, value_enum)]
        method: MethodArg,
        #[arg(long)]
        mask: PathBuf,
        #[arg(long)]
        ckpt: Option<PathBuf>,
    },
    /// Run the full experiment matrix; exits nonzero if any cell failed.
    Matrix,
    /// Post-recovery analysis and retention plots for a finished matrix.
    Report,
    /// Best-case recovery estimate for one generative task.
    UpperBound {
        #[arg(long, default_value = "arith")]
        task: TaskKind,
        #[arg(long, default_value_t = 0.25)]
        ratio: f64,
        #[arg(long)]
        k: Option<usize>,
    },
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::from_json(&fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)?,
        None => ExperimentConfig::default(),
    };
    let out_is_dir = matches!(cli.cmd, Cmd::Train { .. } | Cmd::Sweep { .. } | Cmd::Recover { .. } | Cmd::Matrix | Cmd::Report | Cmd::UpperBound { .. });
    if let (Some(out), true) = (&cli.out, out_is_dir) {
        cfg.out_dir = out.clone();
        if cfg.cache_dir.is_none() {
            cfg.cache_dir = Some(ExperimentConfig::default().out_dir.join("cache"));
        }
    }
    Ok(cfg)
}

fn load_model(ckpt: &Option<PathBuf>, cfg: &ExperimentConfig, seed: u64, tok: &Tokenizer) -> Result<Model> {
    Ok(match ckpt {
        Some(p) => load_checkpoint(p).with_context(|| format!("loading {}", p.display()))?,
        None => load_or_train_baseline(cfg, seed, tok)?,
    })
}

fn read_records(path: &Path) -> Result<Vec<CorpusRecord>> {
    let f = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    Ok(read_jsonl(BufReader::new(f))?)
}

fn read_plan(path: &Path) -> Result<PrunePlan> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(serde_json::from_str(&text).with_context(|| format!("parsing plan {}", path.display()))?)
}

/// Writes to `out` when given, else to stdout.
fn emit(out: &Option<PathBuf>, bytes: &[u8]) -> Result<()> {
    match out {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir)?;
            }
            fs::write(p, bytes).with_context(|| format!("writing {}", p.display()))?;
        }
        None => io::stdout().lock().write_all(bytes)?,
    }
    Ok(())
}

fn emit_json(out: &Option<PathBuf>, value: &impl Serialize) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    emit(out, &bytes)
}

fn out_dir(cli: &Cli, cfg: &ExperimentConfig) -> Result<PathBuf> {
    let dir = cli.out.clone().unwrap_or_else(|| cfg.out_dir.clone());
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn cmd_gen(cli: &Cli, cfg: &ExperimentConfig, task: GenTask, n: Option<usize>) -> Result<()> {
    let seed = cli.seed;
    let count = n.unwrap_or(1000);
    let records: Vec<CorpusRecord> = match task {
        GenTask::Arith => gen_arithmetic(seed, count).iter().map(CorpusRecord::arithmetic).collect(),
        GenTask::Minilang => gen_minilang_tasks(seed, count).iter().map(CorpusRecord::minilang).collect(),
        GenTask::Mcq => gen_mcq(seed, count).iter().map(CorpusRecord::mcq).collect(),
        GenTask::Mixture => {
            let mut mix = cfg.baseline.mixture.clone();
            mix.seed = seed;
            let mut r = mixture_records(&mix)?;
            if let Some(n) = n {
                r.truncate(n);
            }
            r
        }
    };
    let mut buf = Vec::new();
    write_jsonl(&mut buf, &records)?;
    emit(&cli.out, &buf)
}

fn cmd_train(cli: &Cli, cfg: &ExperimentConfig, steps: Option<usize>, tok: &Tokenizer) -> Result<()> {
    let mut spec = resolved_spec(&cfg.baseline, cli.seed);
    if let Some(s) = steps {
        spec.hyper.steps = s;
    }
    let dir = out_dir(cli, cfg)?;
    log::info!("training {} steps", spec.hyper.steps);
    let (model, run) = train_baseline(&spec, tok)?;
    save_checkpoint(&model, &dir.join("baseline.plab"))?;
    fs::write(dir.join("baseline.json"), serde_json::to_vec_pretty(&json!({"spec": spec, "run": run}))?)?;
    let last = run.series.last().map(|p| p.train_loss);
    println!("baseline {:016x} final loss {:?}", model.fingerprint(), last);
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_prune(
    cli: &Cli,
    cfg: &ExperimentConfig,
    strategy: StrategyArg,
    n: usize,
    calib: &Option<PathBuf>,
    benchmark: BenchArg,
    protect_last: bool,
    ckpt: &Option<PathBuf>,
    tok: &Tokenizer,
) -> Result<()> {
    let model = load_model(ckpt, cfg, cli.seed, tok)?;
    let l = model.n_layers();
    let suite = || EvalSuite::new(&cfg.eval, sub_seed(cli.seed, 0x50), tok);
    let records = calib.as_ref().map(|p| read_records(p)).transpose()?;
    let plan = match strategy {
        StrategyArg::Reverse => plan_reverse(l, n, protect_last)?,
        StrategyArg::Bi => {
            let seqs = match &records {
                Some(r) => encode_all(r, tok)?.iter().map(|t| t.tokens()).collect(),
                None => suite()?.bi_calib,
            };
            let scores: BIScores = bi_scores(&model, &seqs)?;
            plan_bi(&scores, n, protect_last)?
        }
        StrategyArg::Iterative => match benchmark {
            BenchArg::Mcq => {
                let items = match &records {
                    Some(r) => mcq_from_records(r)?,
                    None => suite()?.mcq,
                };
                let bench = |mask: &LayerMask| {
                    mcq_accuracy(&model, mask, &items, tok)
                        .map(|s| s.accuracy)
                        .map_err(|e| PruneError::Benchmark(e.to_string()))
                };
                greedy_iterative(&model, bench, n, protect_last)?
            }
            b => {
                let task = if matches!(b, BenchArg::Arith) { TaskKind::Arith } else { TaskKind::Minilang };
                let tasks = match (&records, task) {
                    (Some(r), t) => tasks_from_records(r, t)?,
                    (None, TaskKind::Arith) => suite()?.calib,
                    (None, _) => GenTasks::MiniLang(gen_minilang_tasks(sub_seed(cli.seed, 0x91), cfg.eval.n_calib)),
                };
                greedy_iterative(&model, EvalSuite::benchmark(&tasks, &model, tok), n, protect_last)?
            }
        },
    };
    log::info!("{} removes {:?}", plan.strategy.name(), plan.removed.to_vec());
    emit_json(&cli.out, &plan)
}

fn cmd_sweep(cli: &Cli, cfg: &ExperimentConfig, tasks: &[TaskKind], ckpt: &Option<PathBuf>, tok: &Tokenizer) -> Result<()> {
    let model = load_model(ckpt, cfg, cli.seed, tok)?;
    let suite = EvalSuite::new(&cfg.eval, sub_seed(cli.seed, 0x50), tok)?;
    let fig = run_sweep_figure(&model, &suite, tasks, None, tok)?;
    let dir = out_dir(cli, cfg)?;
    fs::write(dir.join("sweep.json"), serde_json::to_vec_pretty(&fig)?)?;
    fs::write(dir.join("sweep.svg"), sweep_svg(&fig.sweeps))?;
    for (task, s) in &fig.sweeps {
        println!("{:<9} baseline {:.4} best removal {:?}", task.name(), s.baseline, s.argmax().map(|i| s.candidates[i]));
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_probe(
    cli: &Cli,
    cfg: &ExperimentConfig,
    metric: Metric,
    mask: &Option<PathBuf>,
    n: Option<usize>,
    ckpt: &Option<PathBuf>,
    baseline: &Option<PathBuf>,
    tok: &Tokenizer,
) -> Result<()> {
    let model = load_model(ckpt, cfg, cli.seed, tok)?;
    let reference = match baseline {
        Some(p) => load_checkpoint(p).with_context(|| format!("loading {}", p.display()))?,
        None => model.clone(),
    };
    let mask = match mask {
        Some(p) => read_plan(p)?.removed,
        None => LayerMask::empty(),
    };
    mask.validate(model.n_layers())?;
    let mut spec = cfg.eval.clone();
    if let Some(n) = n {
        spec.n_arith = n;
        spec.n_minilang = n;
        spec.n_mcq = n;
        spec.n_probe = n;
    }
    let suite = EvalSuite::new(&spec, sub_seed(cli.seed, 0x50), tok)?;
    let report = match metric {
        Metric::Arith => serde_json::to_value(arithmetic_probe(&reference, &model, &mask, &suite.probe, tok)?)?,
        Metric::Mcq => serde_json::to_value(mcq_accuracy(&model, &mask, &suite.mcq, tok)?)?,
        Metric::Gen => {
            let mut scores = BTreeMap::new();
            for tasks in [&suite.arith, &suite.minilang] {
                scores.insert(tasks.name(), generative_accuracy(&model, &mask, tasks, &eval_params(tasks), tok)?);
            }
            serde_json::to_value(scores)?
        }
        Metric::Syntax => {
            let h = suite.syntax(&model, &mask, tok)?;
            let fractions: BTreeMap<&str, f64> = h.fractions().into_iter().map(|(o, f)| (o.name(), f)).collect();
            json!({"counts": h, "fractions": fractions})
        }
        Metric::Degen => {
            let prompts: Vec<String> = suite.arith.prompts().into_iter().chain(suite.minilang.prompts()).collect();
            let params = GenerationParams::greedy(64, Some(EOS));
            let pruned = DegenerationReport::measure(&generate_all(&model, &mask, &prompts, &params, tok)?)?;
            let base = DegenerationReport::measure(&generate_all(&reference, &LayerMask::empty(), &prompts, &params, tok)?)?;
            serde_json::to_value(pruned.normalized(&base))?
        }
    };
    emit_json(&cli.out, &report)
}

fn cmd_recover(
    cli: &Cli,
    cfg: &ExperimentConfig,
    method: RecoveryMethod,
    mask: &Path,
    ckpt: &Option<PathBuf>,
    tok: &Tokenizer,
) -> Result<()> {
    let teacher = load_model(ckpt, cfg, cli.seed, tok)?;
    let plan = read_plan(mask)?;
    plan.removed.validate(teacher.n_layers())?;
    let dir = out_dir(cli, cfg)?;
    let gt = ground_truth_corpus(&cfg.recovery, cli.seed);
    let (train, heldout) = match method {
        RecoveryMethod::SftGt => (gt.train, gt.heldout),
        _ => {
            let params = sgr_params(cfg, cli.seed);
            let empty = LayerMask::empty();
            let train = generate_sgr(&teacher, &empty, &gt.train, &params, tok)?;
            let heldout = generate_sgr(&teacher, &empty, &gt.heldout, &params, tok)?;
            let mut buf = Vec::new();
            write_jsonl(&mut buf, &train.records)?;
            fs::write(dir.join("sgr_train.jsonl"), buf)?;
            fs::write(dir.join("sgr_provenance.json"), serde_json::to_vec_pretty(&train.provenance)?)?;
            (train.records, heldout.records)
        }
    };
    let (train, heldout) = (encode_all(&train, tok)?, encode_all(&heldout, tok)?);
    let hyper = recovery_hyper(cfg, cli.seed, method);
    let (model, mut run) = match method {
        RecoveryMethod::LowrankSgr => {
            let (run, adapters) = lowrank_finetune(&teacher, &plan.removed, &train, &cfg.recovery.lowrank, &hyper, &heldout)?;
            (adapters.merge(&teacher), run)
        }
        _ => {
            let mut m = teacher.clone();
            let run = sft(&mut m, &plan.removed, &train, &hyper, &heldout)?;
            (m, run)
        }
    };
    run.method = method.name().into();
    save_checkpoint(&model, &dir.join("recovered.plab"))?;
    fs::write(dir.join("recovery_run.json"), serde_json::to_vec_pretty(&run)?)?;
    println!("{} on {:?}: held-out perplexity {:?}", method.name(), plan.removed.to_vec(), run.final_heldout_ppl());
    Ok(())
}

fn cmd_matrix(cfg: &ExperimentConfig, tok: &Tokenizer) -> Result<bool> {
    cfg.validate()?;
    let report = run_matrix(cfg, tok)?;
    for f in &report.failures {
        eprintln!("failed cell seed {} {:?} {:?} {:?}: {}", f.seed, f.strategy, f.ratio, f.recovery, f.error);
    }
    println!(
        "{} cells, {} failures; results in {}",
        report.cells.len(),
        report.failures.len(),
        cfg.out_dir.display()
    );
    Ok(report.ok())
}

fn cmd_report(cfg: &ExperimentConfig, tok: &Tokenizer) -> Result<()> {
    let report = prunelab::harness::load_report(&cfg.out_dir)?;
    for s in &cfg.strategies {
        for r in &cfg.recoveries {
            let path = cfg.out_dir.join(format!("retention_{}_{}.svg", s.name(), r.name()));
            fs::write(path, retention_svg(&report.table, s.name(), r.name()))?;
        }
    }
    let post = run_post_recovery_analysis(cfg, tok)?;
    fs::write(cfg.out_dir.join("post_recovery.svg"), &post.svg)?;
    fs::write(cfg.out_dir.join("post_recovery.json"), serde_json::to_vec_pretty(&post.bars)?)?;
    println!("{} recovered cells analysed; figures in {}", post.bars.len(), cfg.out_dir.display());
    Ok(())
}

fn cmd_upper_bound(cli: &Cli, cfg: &ExperimentConfig, task: TaskKind, ratio: f64, k: Option<usize>, tok: &Tokenizer) -> Result<()> {
    if !task.is_generative() {
        bail!("upper-bound needs a generative task (arith or minilang)");
    }
    let report = run_upper_bound(cfg, task, ratio, cli.seed, k, tok)?;
    eprintln!(
        "{}: baseline {:.4} pruned {:.4} recovered {:.4}",
        task.name(),
        report.baseline_score,
        report.pruned_score,
        report.recovered_score
    );
    let out = cli.out.as_ref().map(|d| d.join(format!("upper_bound_{}_seed{}.json", task.name(), cli.seed)));
    emit_json(&out, &report)
}

fn run(cli: &Cli) -> Result<bool> {
    let cfg = load_config(cli)?;
    let tok = Tokenizer::new();
    match &cli.cmd {
        Cmd::Gen { task, n } => cmd_gen(cli, &cfg, *task, *n)?,
        Cmd::Train { steps } => cmd_train(cli, &cfg, *steps, &tok)?,
        Cmd::Prune { strategy, n, calib, benchmark, protect_last, ckpt } => {
            cmd_prune(cli, &cfg, *strategy, *n, calib, *benchmark, *protect_last || cfg.protect_last, ckpt, &tok)?
        }
        Cmd::Sweep { tasks, ckpt } => cmd_sweep(cli, &cfg, tasks, ckpt, &tok)?,
        Cmd::Probe { metric, mask, n, ckpt, baseline } => cmd_probe(cli, &cfg, *metric, mask, *n, ckpt, baseline, &tok)?,
        Cmd::Recover { method, mask, ckpt } => cmd_recover(cli, &cfg, (*method).into(), mask, ckpt, &tok)?,
        Cmd::Matrix => return cmd_matrix(&cfg, &tok),
        Cmd::Report => cmd_report(&cfg, &tok)?,
        Cmd::UpperBound { task, ratio, k } => cmd_upper_bound(cli, &cfg, *task, *ratio, *k, &tok)?,
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
