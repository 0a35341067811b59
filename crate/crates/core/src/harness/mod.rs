//! Experiment orchestration: baselines, the pruning × recovery matrix,
//! retention tables and plots.

mod baseline;
mod config;
mod figures;
mod matrix;
mod suite;

pub use baseline::{content_key, load_or_train_baseline, resolved_spec, train_baseline};
pub use config::{
    layers_for_ratio, BaselineSpec, EvalSpec, ExperimentConfig, RecoveryMethod, RecoverySpec, TaskKind,
};
pub use figures::{
    bars_svg, fmt_value, line_chart_svg, retention_svg, run_post_recovery_analysis, run_sweep_figure, run_upper_bound, sweep_svg,
    PostRecoveryReport, RecoveryBars, Series, SweepFigure, UpperBoundReport,
};
pub use matrix::{
    load_cell_model, load_report, mean_table, recovery_hyper, retention_table, run_matrix, sgr_params, write_reports, CellFailure, CellResult,
    MatrixReport, RetentionRow, RetentionTable, SeedBaseline, SeedContext, CSV_HEADER,
};
pub use suite::{encode_all, ground_truth_corpus, mcq_from_records, tasks_from_records, EvalSuite, RecoveryCorpus};

use crate::corpora::CorpusError;
use crate::diagnostics::DiagError;
use crate::model::ModelError;
use crate::pruning::PruneError;
use crate::recovery::RecoveryError;

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("invalid experiment config: {0}")]
    Config(String),
    #[error("missing artifact: {0}")]
    Missing(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Diag(#[from] DiagError),
    #[error(transparent)]
    Prune(#[from] PruneError),
    #[error(transparent)]
    Recovery(#[from] RecoveryError),
}
