//! The experiment matrix: seeds × strategies × ratios × recovery methods.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::baseline::{content_key, load_or_train_baseline};
use super::config::{layers_for_ratio, ExperimentConfig, RecoveryMethod, TaskKind};
use super::suite::{encode_all, ground_truth_corpus, EvalSuite, RecoveryCorpus};
use super::HarnessError;
use crate::corpora::{sub_seed, CorpusRecord, Tokenizer, TrainingRecord};
use crate::diagnostics::SyntaxHistogram;
use crate::model::{load_checkpoint, save_checkpoint, LayerMask, Model};
use crate::pruning::{bi_scores, greedy_iterative, plan_bi, plan_reverse, PrunePlan, Strategy, TraceEntry};
use crate::recovery::{generate_sgr, lowrank_finetune, sft, SgrDataset, SgrParams, TrainHyper, TrainingRun};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetentionRow {
    pub task: String,
    pub strategy: String,
    pub ratio: f64,
    pub recovery: String,
    pub raw: f64,
    pub baseline: f64,
    pub retention: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RetentionTable {
    pub rows: Vec<RetentionRow>,
}

pub const CSV_HEADER: &str = "task,strategy,ratio,recovery,raw,baseline,retention";

impl RetentionTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{:.6},{:.6},{:.6}\n",
                r.task, r.strategy, r.ratio, r.recovery, r.raw, r.baseline, r.retention
            ));
        }
        out
    }

    pub fn find(&self, task: &str, strategy: &str, ratio: f64, recovery: &str) -> Option<&RetentionRow> {
        self.rows
            .iter()
            .find(|r| r.task == task && r.strategy == strategy && r.ratio == ratio && r.recovery == recovery)
    }

    /// Mean retention over the given tasks for one (strategy, ratio, recovery) cell.
    pub fn family_mean(&self, tasks: &[&str], strategy: &str, ratio: f64, recovery: &str) -> Option<f64> {
        let vals: Vec<f64> =
            tasks.iter().filter_map(|t| self.find(t, strategy, ratio, recovery)).map(|r| r.retention).collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }
}

/// Everything measured for one cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub key: String,
    pub seed: u64,
    pub strategy: Strategy,
    pub ratio: f64,
    pub removed: Vec<usize>,
    pub recovery: RecoveryMethod,
    pub scores: BTreeMap<TaskKind, f64>,
    pub syntax: Option<SyntaxHistogram>,
    pub run: Option<TrainingRun>,
    /// File name of the recovered checkpoint under `cells/`, if any.
    pub checkpoint: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellFailure {
    pub seed: u64,
    pub strategy: Option<Strategy>,
    pub ratio: Option<f64>,
    pub recovery: Option<RecoveryMethod>,
    pub error: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedBaseline {
    pub fingerprint: String,
    pub scores: BTreeMap<TaskKind, f64>,
    pub syntax: Option<SyntaxHistogram>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatrixReport {
    /// Seed-averaged table: mean raw, mean baseline, their ratio.
    pub table: RetentionTable,
    pub per_seed: BTreeMap<u64, RetentionTable>,
    pub baselines: BTreeMap<u64, SeedBaseline>,
    pub cells: Vec<CellResult>,
    pub failures: Vec<CellFailure>,
}

impl MatrixReport {
    pub fn ok(&self) -> bool {
        self.failures.is_empty()
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), HarnessError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, serde_json::to_vec_pretty(value)?)?;
    fs::rename(tmp, path)?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Option<T> {
    fs::read(path).ok().and_then(|b| serde_json::from_slice(&b).ok())
}

/// Recovery hyperparameters with the seed folded in.
pub fn recovery_hyper(cfg: &ExperimentConfig, seed: u64, method: RecoveryMethod) -> TrainHyper {
    let mut h = cfg.recovery.hyper.clone();
    h.seed = sub_seed(seed, 0x60);
    if method == RecoveryMethod::LowrankSgr {
        h.lr = cfg.recovery.lowrank_lr;
    }
    h
}

pub fn sgr_params(cfg: &ExperimentConfig, seed: u64) -> SgrParams {
    SgrParams { seed: sub_seed(seed, 0x70), ..cfg.recovery.sgr.clone() }
}

/// Per-seed state shared by every cell of that seed.
pub struct SeedContext<'a> {
    pub cfg: &'a ExperimentConfig,
    pub tok: &'a Tokenizer,
    pub seed: u64,
    pub baseline: Model,
    pub fingerprint: String,
    pub suite: EvalSuite,
    gt: Option<RecoveryCorpus>,
    sgr: Option<(SgrDataset, SgrDataset)>,
    sgr_elapsed_s: f64,
    greedy: BTreeMap<Strategy, PrunePlan>,
    bi: Option<crate::pruning::BIScores>,
}

impl<'a> SeedContext<'a> {
    pub fn new(cfg: &'a ExperimentConfig, tok: &'a Tokenizer, seed: u64) -> Result<Self, HarnessError> {
        let baseline = load_or_train_baseline(cfg, seed, tok)?;
        let fingerprint = format!("{:016x}", baseline.fingerprint());
        let suite = EvalSuite::new(&cfg.eval, sub_seed(seed, 0x50), tok)?;
        Ok(Self { cfg, tok, seed, baseline, fingerprint, suite, gt: None, sgr: None, sgr_elapsed_s: 0.0, greedy: BTreeMap::new(), bi: None })
    }

    fn cache(&self) -> PathBuf {
        self.cfg.cache_dir()
    }

    pub fn baseline_scores(&self) -> Result<SeedBaseline, HarnessError> {
        let key = content_key(&json!({"kind": "baseline_scores", "model": self.fingerprint, "seed": self.seed,
            "eval": self.cfg.eval, "tasks": self.cfg.tasks}));
        let path = self.cache().join(format!("scores-{key}.json"));
        if let Some(s) = read_json(&path) {
            return Ok(s);
        }
        let empty = LayerMask::empty();
        let (scores, syntax) = self.evaluate(&self.baseline, &empty)?;
        let s = SeedBaseline { fingerprint: self.fingerprint.clone(), scores, syntax };
        write_json(&path, &s)?;
        Ok(s)
    }

    /// Scores every configured task; the minilang score is the Pass fraction of the syntax histogram.
    pub fn evaluate(
        &self,
        model: &Model,
        mask: &LayerMask,
    ) -> Result<(BTreeMap<TaskKind, f64>, Option<SyntaxHistogram>), HarnessError> {
        let mut scores = BTreeMap::new();
        let mut syntax = None;
        for &t in &self.cfg.tasks {
            if t == TaskKind::Minilang {
                let h = self.suite.syntax(model, mask, self.tok)?;
                scores.insert(t, h.pass as f64 / h.total().max(1) as f64);
                syntax = Some(h);
            } else {
                scores.insert(t, self.suite.score(t, &self.baseline, model, mask, self.tok)?);
            }
        }
        Ok((scores, syntax))
    }

    /// Pruning plan for `n` layers. Greedy plans are computed once for the
    /// largest `n` needed and truncated, since round `k` never depends on later rounds.
    pub fn plan(&mut self, strategy: Strategy, n: usize, max_n: usize) -> Result<PrunePlan, HarnessError> {
        let l = self.baseline.n_layers();
        match strategy {
            Strategy::Reverse => Ok(plan_reverse(l, n, self.cfg.protect_last)?),
            Strategy::Bi => {
                if self.bi.is_none() {
                    self.bi = Some(bi_scores(&self.baseline, &self.suite.bi_calib)?);
                }
                Ok(plan_bi(self.bi.as_ref().expect("just computed"), n, self.cfg.protect_last)?)
            }
            Strategy::Iterative => {
                if !self.greedy.contains_key(&strategy) {
                    let key = content_key(&json!({"kind": "greedy", "model": self.fingerprint, "seed": self.seed,
                        "n": max_n, "calib": self.cfg.eval.n_calib, "protect_last": self.cfg.protect_last}));
                    let path = self.cache().join(format!("plan-{key}.json"));
                    let plan = match read_json::<PrunePlan>(&path) {
                        Some(p) => p,
                        None => {
                            let bench = EvalSuite::benchmark(&self.suite.calib, &self.baseline, self.tok);
                            let p = greedy_iterative(&self.baseline, bench, max_n, self.cfg.protect_last)?;
                            write_json(&path, &p)?;
                            p
                        }
                    };
                    self.greedy.insert(strategy, plan);
                }
                let full = &self.greedy[&strategy];
                let mut removed = LayerMask::empty();
                let mut trace = Vec::new();
                for entry in full.trace.iter().take(n) {
                    if let TraceEntry::Round { chosen, .. } = entry {
                        removed.insert(*chosen);
                    }
                    trace.push(entry.clone());
                }
                Ok(PrunePlan { strategy, removed, trace })
            }
            Strategy::Manual => Err(HarnessError::Config("manual plans are not part of a matrix".into())),
        }
    }

    pub fn ground_truth(&mut self) -> &RecoveryCorpus {
        if self.gt.is_none() {
            self.gt = Some(ground_truth_corpus(&self.cfg.recovery, sub_seed(self.seed, 0x80)));
        }
        self.gt.as_ref().expect("just built")
    }

    /// Teacher responses to the ground-truth train and held-out prompts.
    pub fn sgr(&mut self) -> Result<&(SgrDataset, SgrDataset), HarnessError> {
        if self.sgr.is_none() {
            let params = sgr_params(self.cfg, self.seed);
            let key = content_key(&json!({"kind": "sgr", "teacher": self.fingerprint, "params": params,
                "n_train": self.cfg.recovery.n_train, "n_heldout": self.cfg.recovery.n_heldout, "seed": self.seed}));
            let path = self.cache().join(format!("sgr-{key}.json"));
            let (train, heldout, elapsed) = match read_json::<(SgrDataset, SgrDataset, f64)>(&path) {
                Some(p) => p,
                None => {
                    let t0 = Instant::now();
                    let gt = self.ground_truth().clone();
                    let empty = LayerMask::empty();
                    let train = generate_sgr(&self.baseline, &empty, &gt.train, &params, self.tok)?;
                    let mut hp = params.clone();
                    hp.seed = sub_seed(params.seed, 1);
                    let heldout = generate_sgr(&self.baseline, &empty, &gt.heldout, &hp, self.tok)?;
                    let elapsed = t0.elapsed().as_secs_f64();
                    write_json(&path, &(&train, &heldout, elapsed))?;
                    (train, heldout, elapsed)
                }
            };
            self.sgr = Some((train, heldout));
            self.sgr_elapsed_s = elapsed;
        }
        Ok(self.sgr.as_ref().expect("just built"))
    }

    /// Training and held-out records for a recovery method.
    pub fn recovery_data(
        &mut self,
        method: RecoveryMethod,
    ) -> Result<(Vec<TrainingRecord>, Vec<TrainingRecord>), HarnessError> {
        let tok = self.tok;
        let (train, heldout): (Vec<CorpusRecord>, Vec<CorpusRecord>) = match method {
            RecoveryMethod::None => return Ok((Vec::new(), Vec::new())),
            RecoveryMethod::SftGt => {
                let gt = self.ground_truth();
                (gt.train.clone(), gt.heldout.clone())
            }
            RecoveryMethod::SftSgr | RecoveryMethod::LowrankSgr => {
                let (t, h) = self.sgr()?;
                (t.records.clone(), h.records.clone())
            }
        };
        Ok((encode_all(&train, tok)?, encode_all(&heldout, tok)?))
    }

    /// Applies a recovery method to the pruned baseline.
    pub fn recover(
        &mut self,
        method: RecoveryMethod,
        mask: &LayerMask,
    ) -> Result<Option<(Model, TrainingRun)>, HarnessError> {
        let (train, heldout) = self.recovery_data(method)?;
        let hyper = recovery_hyper(self.cfg, self.seed, method);
        let t0 = Instant::now();
        let mut out = match method {
            RecoveryMethod::None => None,
            RecoveryMethod::SftGt | RecoveryMethod::SftSgr => {
                let mut m = self.baseline.clone();
                let mut run = sft(&mut m, mask, &train, &hyper, &heldout)?;
                run.method = method.name().into();
                Some((m, run))
            }
            RecoveryMethod::LowrankSgr => {
                let (mut run, adapters) =
                    lowrank_finetune(&self.baseline, mask, &train, &self.cfg.recovery.lowrank, &hyper, &heldout)?;
                run.method = method.name().into();
                Some((adapters.merge(&self.baseline), run))
            }
        };
        // Wall-clock cost, kept out of every cache key.
        if let Some((_, run)) = &mut out {
            run.meta.insert("elapsed_s".into(), json!(t0.elapsed().as_secs_f64()));
            if matches!(method, RecoveryMethod::SftSgr | RecoveryMethod::LowrankSgr) {
                run.meta.insert("sgr_elapsed_s".into(), json!(self.sgr_elapsed_s));
            }
        }
        Ok(out)
    }
}

struct PendingCell {
    strategy: Strategy,
    ratio: f64,
    plan: PrunePlan,
    recovery: RecoveryMethod,
    key: String,
}

fn cell_key(ctx: &SeedContext, plan: &PrunePlan, recovery: RecoveryMethod) -> String {
    let rec = (recovery != RecoveryMethod::None).then(|| {
        json!({"spec": ctx.cfg.recovery, "hyper": recovery_hyper(ctx.cfg, ctx.seed, recovery)})
    });
    content_key(&json!({"kind": "cell", "model": ctx.fingerprint, "seed": ctx.seed, "removed": plan.removed,
        "recovery": recovery, "recovery_cfg": rec, "eval": ctx.cfg.eval, "tasks": ctx.cfg.tasks}))
}

fn run_cell(ctx: &mut SeedContext, cell: &PendingCell, cells_dir: &Path) -> Result<CellResult, HarnessError> {
    let mask = cell.plan.removed.clone();
    let recovered = ctx.recover(cell.recovery, &mask)?;
    let (model, run) = match &recovered {
        Some((m, r)) => (m, Some(r.clone())),
        None => (&ctx.baseline, None),
    };
    let (scores, syntax) = ctx.evaluate(model, &mask)?;
    let checkpoint = match &recovered {
        Some((m, _)) => {
            let name = format!("{}.plab", cell.key);
            fs::create_dir_all(cells_dir)?;
            save_checkpoint(m, &cells_dir.join(&name))?;
            Some(name)
        }
        None => None,
    };
    Ok(CellResult {
        key: cell.key.clone(),
        seed: ctx.seed,
        strategy: cell.strategy,
        ratio: cell.ratio,
        removed: mask.to_vec(),
        recovery: cell.recovery,
        scores,
        syntax,
        run,
        checkpoint,
    })
}

/// One row per (cell, task): raw score, baseline score and their ratio.
/// Tasks whose baseline score is zero are left out.
pub fn retention_table(tasks: &[TaskKind], cells: &[&CellResult], base: &SeedBaseline) -> RetentionTable {
    let mut rows = Vec::new();
    for c in cells {
        for &t in tasks {
            let (Some(&raw), Some(&b)) = (c.scores.get(&t), base.scores.get(&t)) else { continue };
            if b <= 0.0 {
                continue;
            }
            rows.push(RetentionRow {
                task: t.name().into(),
                strategy: c.strategy.name().into(),
                ratio: c.ratio,
                recovery: c.recovery.name().into(),
                raw,
                baseline: b,
                retention: raw / b,
            });
        }
    }
    RetentionTable { rows }
}

/// Seed-averaged table: mean raw over mean baseline for every row key.
pub fn mean_table(per_seed: &BTreeMap<u64, RetentionTable>) -> RetentionTable {
    let mut order: Vec<(String, String, u64, String)> = Vec::new();
    let mut acc: BTreeMap<(String, String, u64, String), (f64, f64, f64, usize)> = BTreeMap::new();
    for table in per_seed.values() {
        for r in &table.rows {
            let k = (r.task.clone(), r.strategy.clone(), r.ratio.to_bits(), r.recovery.clone());
            let e = acc.entry(k.clone()).or_insert_with(|| {
                order.push(k);
                (0.0, 0.0, r.ratio, 0)
            });
            e.0 += r.raw;
            e.1 += r.baseline;
            e.3 += 1;
        }
    }
    let rows = order
        .into_iter()
        .map(|k| {
            let (raw, base, ratio, n) = acc[&k];
            let (raw, base) = (raw / n as f64, base / n as f64);
            RetentionRow { task: k.0, strategy: k.1, ratio, recovery: k.3, raw, baseline: base, retention: raw / base }
        })
        .collect();
    RetentionTable { rows }
}

/// Runs (or resumes) every cell. Cell failures are recorded and the matrix
/// carries on; check [`MatrixReport::ok`].
pub fn run_matrix(cfg: &ExperimentConfig, tok: &Tokenizer) -> Result<MatrixReport, HarnessError> {
    cfg.validate()?;
    let cells_dir = cfg.out_dir.join("cells");
    fs::create_dir_all(&cells_dir)?;
    let mut report = MatrixReport {
        table: RetentionTable::default(),
        per_seed: BTreeMap::new(),
        baselines: BTreeMap::new(),
        cells: Vec::new(),
        failures: Vec::new(),
    };
    for &seed in &cfg.seeds {
        let seed_fail = |e: HarnessError| CellFailure { seed, strategy: None, ratio: None, recovery: None, error: e.to_string() };
        let mut ctx = match SeedContext::new(cfg, tok, seed) {
            Ok(c) => c,
            Err(e) => {
                report.failures.push(seed_fail(e));
                continue;
            }
        };
        let base = match ctx.baseline_scores() {
            Ok(b) => b,
            Err(e) => {
                report.failures.push(seed_fail(e));
                continue;
            }
        };
        let l = ctx.baseline.n_layers();
        let max_n = cfg.ratios.iter().map(|&r| layers_for_ratio(l, r)).max().unwrap_or(0);
        let mut seed_cells = Vec::new();
        for &strategy in &cfg.strategies {
            for &ratio in &cfg.ratios {
                let n = layers_for_ratio(l, ratio);
                let plan = match ctx.plan(strategy, n, max_n) {
                    Ok(p) => p,
                    Err(e) => {
                        report.failures.push(CellFailure {
                            seed,
                            strategy: Some(strategy),
                            ratio: Some(ratio),
                            recovery: None,
                            error: e.to_string(),
                        });
                        continue;
                    }
                };
                for &recovery in &cfg.recoveries {
                    let key = cell_key(&ctx, &plan, recovery);
                    let cell = PendingCell { strategy, ratio, plan: plan.clone(), recovery, key };
                    let path = cells_dir.join(format!("{}.json", cell.key));
                    let cached: Option<CellResult> = read_json(&path);
                    let result = match cached {
                        Some(mut c) if c.key == cell.key => {
                            c.strategy = strategy;
                            c.ratio = ratio;
                            Ok(c)
                        }
                        _ => {
                            log::info!("seed {seed} {} ratio {ratio} {}", strategy.name(), recovery.name());
                            run_cell(&mut ctx, &cell, &cells_dir).and_then(|c| write_json(&path, &c).map(|_| c))
                        }
                    };
                    match result {
                        Ok(c) => seed_cells.push(c),
                        Err(e) => report.failures.push(CellFailure {
                            seed,
                            strategy: Some(strategy),
                            ratio: Some(ratio),
                            recovery: Some(recovery),
                            error: e.to_string(),
                        }),
                    }
                }
            }
        }
        let refs: Vec<&CellResult> = seed_cells.iter().collect();
        report.per_seed.insert(seed, retention_table(&cfg.tasks, &refs, &base));
        report.baselines.insert(seed, base);
        report.cells.extend(seed_cells);
    }
    report.table = mean_table(&report.per_seed);
    write_reports(cfg, &report)?;
    Ok(report)
}

pub fn write_reports(cfg: &ExperimentConfig, report: &MatrixReport) -> Result<(), HarnessError> {
    fs::create_dir_all(&cfg.out_dir)?;
    fs::write(cfg.out_dir.join("retention.csv"), report.table.to_csv())?;
    for (seed, t) in &report.per_seed {
        fs::write(cfg.out_dir.join(format!("retention_seed{seed}.csv")), t.to_csv())?;
    }
    write_json(&cfg.out_dir.join("retention.json"), report)?;
    write_json(&cfg.out_dir.join("failures.json"), &report.failures)?;
    Ok(())
}

/// Loads a matrix report written by [`run_matrix`].
pub fn load_report(out_dir: &Path) -> Result<MatrixReport, HarnessError> {
    let path = out_dir.join("retention.json");
    let bytes = fs::read(&path).map_err(|_| HarnessError::Missing(path.display().to_string()))?;
    Ok(serde_json::from_slice(&bytes)?)
}

/// The recovered checkpoint of a cell.
pub fn load_cell_model(out_dir: &Path, cell: &CellResult) -> Result<Option<Model>, HarnessError> {
    match &cell.checkpoint {
        None => Ok(None),
        Some(name) => {
            let p = out_dir.join("cells").join(name);
            if !p.exists() {
                return Err(HarnessError::Missing(p.display().to_string()));
            }
            Ok(Some(load_checkpoint(&p)?))
        }
    }
}
