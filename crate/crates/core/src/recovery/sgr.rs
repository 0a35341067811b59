//! Self-generated responses: the unpruned teacher answers the training prompts.

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::RecoveryError;
use crate::corpora::{sub_seed, CorpusRecord, Tokenizer, BOS};
use crate::model::{GenerationParams, LayerMask, Model};
use crate::par::par_map;

/// Sampling settings for SGR generation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SgrParams {
    pub temperature: f64,
    pub max_new_tokens: usize,
    pub seed: u64,
    /// Responses per prompt.
    pub k: usize,
}

impl Default for SgrParams {
    fn default() -> Self {
        Self { temperature: 0.7, max_new_tokens: 64, seed: 0, k: 1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub teacher_ckpt: String,
    pub params: SgrParams,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SgrDataset {
    /// Teacher responses; `meta` keeps the source record's metadata plus
    /// `k` (sample index) and `provenance`.
    pub records: Vec<CorpusRecord>,
    pub provenance: Provenance,
    pub dropped_empty: usize,
}

/// Samples `params.k` teacher responses for every prompt. Sample `j` of
/// prompt `i` uses its own seed, so the dataset is independent of scheduling.
pub fn generate_sgr(
    teacher: &Model,
    teacher_mask: &LayerMask,
    prompts: &[CorpusRecord],
    params: &SgrParams,
    tok: &Tokenizer,
) -> Result<SgrDataset, RecoveryError> {
    if !teacher_mask.is_empty() {
        return Err(RecoveryError::PrunedTeacher(teacher_mask.to_vec()));
    }
    if params.k == 0 {
        return Err(RecoveryError::Config("k must be at least 1".into()));
    }
    let provenance = Provenance { teacher_ckpt: format!("{:016x}", teacher.fingerprint()), params: params.clone() };
    let jobs: Vec<(usize, usize)> = (0..prompts.len()).flat_map(|i| (0..params.k).map(move |j| (i, j))).collect();
    let outputs = par_map(&jobs, |&(i, j)| -> Result<String, RecoveryError> {
        let mut prompt = vec![BOS];
        prompt.extend(tok.tokenize(&prompts[i].prompt)?);
        let gp = GenerationParams {
            max_new_tokens: params.max_new_tokens,
            temperature: params.temperature,
            seed: sub_seed(params.seed, (i * params.k + j) as u64),
            stop_token: Some(crate::corpora::EOS),
        };
        let out = teacher.generate(&prompt, teacher_mask, &gp)?;
        Ok(tok.decode_lossy(&out))
    });
    let prov_json = serde_json::to_value(&provenance).expect("provenance serialises");
    let mut records = Vec::new();
    let mut dropped_empty = 0;
    for (&(i, j), out) in jobs.iter().zip(outputs) {
        let response = out?;
        if response.is_empty() {
            dropped_empty += 1;
            continue;
        }
        let mut meta = match &prompts[i].meta {
            serde_json::Value::Object(m) => m.clone(),
            _ => serde_json::Map::new(),
        };
        meta.insert("k".into(), json!(j));
        meta.insert("provenance".into(), prov_json.clone());
        records.push(CorpusRecord { prompt: prompts[i].prompt.clone(), response, meta: serde_json::Value::Object(meta) });
    }
    Ok(SgrDataset { records, provenance, dropped_empty })
}
