//! Training (or loading) the unpruned baseline for a seed, cached by content hash.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use super::config::{BaselineSpec, ExperimentConfig};
use super::HarnessError;
use crate::corpora::{build_mixture, sub_seed, Tokenizer};
use crate::model::{fnv1a64, load_checkpoint, save_checkpoint, LayerMask, Model};
use crate::recovery::{sft, TrainingRun};

/// The spec with the model-init and data-order seeds derived from `seed`.
pub fn resolved_spec(spec: &BaselineSpec, seed: u64) -> BaselineSpec {
    let mut s = spec.clone();
    s.model.seed = sub_seed(seed, 0x11);
    s.hyper.seed = sub_seed(seed, 0x12);
    s
}

pub fn content_key<T: serde::Serialize>(value: &T) -> String {
    format!("{:016x}", fnv1a64(&serde_json::to_vec(value).expect("serialisable key")))
}

pub fn train_baseline(spec: &BaselineSpec, tok: &Tokenizer) -> Result<(Model, TrainingRun), HarnessError> {
    let t0 = Instant::now();
    let data = build_mixture(&spec.mixture, tok)?;
    let mut model = Model::init(spec.model.clone())?;
    let mut run = sft(&mut model, &LayerMask::empty(), &data, &spec.hyper, &[])?;
    run.meta.insert("elapsed_s".into(), serde_json::json!(t0.elapsed().as_secs_f64()));
    Ok((model, run))
}

fn cached_path(dir: &Path, spec: &BaselineSpec) -> PathBuf {
    dir.join(format!("baseline-{}.plab", content_key(spec)))
}

/// Loads the cached baseline for `seed`, training and caching it first if needed.
pub fn load_or_train_baseline(cfg: &ExperimentConfig, seed: u64, tok: &Tokenizer) -> Result<Model, HarnessError> {
    if let Some(p) = &cfg.baseline_ckpt {
        return Ok(load_checkpoint(p)?);
    }
    let spec = resolved_spec(&cfg.baseline, seed);
    let dir = cfg.cache_dir();
    let path = cached_path(&dir, &spec);
    if path.exists() {
        return Ok(load_checkpoint(&path)?);
    }
    log::info!("training baseline for seed {seed} ({} steps)", spec.hyper.steps);
    let (model, run) = train_baseline(&spec, tok)?;
    fs::create_dir_all(&dir)?;
    save_checkpoint(&model, &path)?;
    fs::write(path.with_extension("json"), serde_json::to_vec_pretty(&run)?)?;
    Ok(model)
}
