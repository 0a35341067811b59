mod common;

use common::{char_model, naive_logits, rng, roughen};
use prunelab::corpora::{gen_arithmetic, CorpusRecord, Tokenizer, TrainingRecord};
use prunelab::model::{LayerMask, ModelVars};
use prunelab::numcore::Graph;
use prunelab::recovery::{
    eval_perplexity, generate_sgr, lowrank_finetune, pack, response_nll, sft, Adapters, LowRankHyper, RecoveryError,
    SgrParams, TrainHyper,
};
use rand::Rng;

fn records(n: usize, seed: u64) -> (Vec<CorpusRecord>, Vec<TrainingRecord>) {
    let tok = Tokenizer::new();
    let recs: Vec<CorpusRecord> = gen_arithmetic(seed, n).iter().map(CorpusRecord::arithmetic).collect();
    let enc = recs.iter().map(|r| r.encode(&tok).unwrap()).collect();
    (recs, enc)
}

fn hyper(steps: usize) -> TrainHyper {
    TrainHyper { steps, batch_size: 4, lr: 3e-3, warmup: 0, eval_every: 0, clip_norm: 1.0, seed: 1 }
}

#[test]
fn zero_initialised_adapters_are_the_identity() {
    let mut r = rng(1);
    let mut model = char_model(3, 2);
    roughen(&mut model, &mut r);
    let mask = LayerMask::new([1]);
    let ads = Adapters::new(&model, &mask, &LowRankHyper::default(), 5).unwrap();
    assert!(ads.blocks[1].is_none());
    let merged = ads.merge(&model);
    let toks = [1usize, 20, 30, 40, 50];
    assert_eq!(model.logits(&toks, &mask).unwrap(), merged.logits(&toks, &mask).unwrap());
}

#[test]
fn merged_adapters_match_the_adapter_graph() {
    let mut r = rng(3);
    let mut model = char_model(3, 4);
    roughen(&mut model, &mut r);
    let mask = LayerMask::new([2]);
    let mut ads = Adapters::new(&model, &mask, &LowRankHyper { rank: 2, alpha: 4.0 }, 7).unwrap();
    for t in ads.tensors_mut() {
        t.data_mut().iter_mut().for_each(|v| *v = r.gen_range(-0.2..0.2));
    }
    let (_, enc) = records(3, 5);
    let batch = pack(&enc.iter().collect::<Vec<_>>());
    let mut g = Graph::new();
    let vars = ModelVars::bind(&mut g, &model.weights, false);
    let ad_vars = ads.bind(&mut g);
    let logits = model.graph_logits(&mut g, &vars, &batch, &mask, Some(&ad_vars)).unwrap();
    let graph = g.value(logits).data().to_vec();
    let merged = ads.merge(&model);
    let mut flat = Vec::new();
    for rec in &enc {
        flat.extend(merged.logits(&rec.tokens()[..rec.len() - 1], &mask).unwrap());
    }
    assert_eq!(graph.len(), flat.len());
    for (a, b) in graph.iter().zip(&flat) {
        assert!((a - b).abs() < 1e-9, "{a} vs {b}");
    }
}

#[test]
fn response_nll_matches_reference_forward() {
    let mut r = rng(8);
    let mut model = char_model(2, 9);
    roughen(&mut model, &mut r);
    let (_, enc) = records(5, 2);
    let (nll, count) = response_nll(&model, &LayerMask::new([0]), &enc).unwrap();
    let v = model.config.vocab_size;
    let (mut want, mut n) = (0.0, 0);
    for rec in &enc {
        let t = rec.tokens();
        let logits = naive_logits(&model, &t[..t.len() - 1], &[0]);
        for p in rec.prompt.len()..t.len() {
            let row = &logits[(p - 1) * v..p * v];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            want -= row[t[p]] - mx - row.iter().map(|x| (x - mx).exp()).sum::<f64>().ln();
            n += 1;
        }
    }
    assert_eq!(count, n);
    assert!((nll - want).abs() < 1e-8 * want.abs().max(1.0));
}

#[test]
fn uniform_model_perplexity_is_vocab_size() {
    let mut model = char_model(2, 1);
    for t in model.weights.tensors_mut() {
        t.data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let (_, enc) = records(4, 3);
    let ppl = eval_perplexity(&model, &LayerMask::empty(), &enc).unwrap();
    assert!((ppl - model.config.vocab_size as f64).abs() < 1e-9, "{ppl}");
    assert!(matches!(eval_perplexity(&model, &LayerMask::empty(), &[]), Err(RecoveryError::EmptyDataset)));
}

#[test]
fn sft_overfits_and_leaves_pruned_blocks_alone() {
    let mut model = char_model(3, 6);
    let (_, enc) = records(4, 4);
    let mask = LayerMask::new([1]);
    let before = eval_perplexity(&model, &mask, &enc).unwrap();
    let frozen = model.weights.blocks[1].clone();
    let run = sft(&mut model, &mask, &enc, &hyper(150), &enc).unwrap();
    let after = run.final_heldout_ppl().unwrap();
    assert!(after < before / 3.0, "{before} -> {after}");
    assert_eq!(model.weights.blocks[1], frozen);
    assert_eq!(run.final_checkpoint, format!("{:016x}", model.fingerprint()));
}

#[test]
fn lowrank_finetune_trains_adapters_only() {
    let model = char_model(3, 6);
    let (_, enc) = records(4, 4);
    let mask = LayerMask::new([2]);
    let before = eval_perplexity(&model, &mask, &enc).unwrap();
    let copy = model.clone();
    let (run, ads) =
        lowrank_finetune(&model, &mask, &enc, &LowRankHyper { rank: 4, alpha: 8.0 }, &hyper(150), &enc).unwrap();
    assert_eq!(model, copy);
    assert!(ads.blocks[2].is_none());
    let after = eval_perplexity(&ads.merge(&model), &mask, &enc).unwrap();
    assert!(after < 0.8 * before, "{before} -> {after}");
    assert!((run.final_heldout_ppl().unwrap() - after).abs() < 1e-9);
    assert!(matches!(
        lowrank_finetune(&model, &mask, &enc, &LowRankHyper { rank: 0, alpha: 1.0 }, &hyper(1), &[]),
        Err(RecoveryError::Rank)
    ));
}

#[test]
fn sgr_is_deterministic_and_records_provenance() {
    let tok = Tokenizer::new();
    let teacher = char_model(2, 12);
    let (prompts, _) = records(6, 6);
    let params = SgrParams { temperature: 0.8, max_new_tokens: 12, seed: 42, k: 2 };
    let a = generate_sgr(&teacher, &LayerMask::empty(), &prompts, &params, &tok).unwrap();
    let b = generate_sgr(&teacher, &LayerMask::empty(), &prompts, &params, &tok).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.records.len() + a.dropped_empty, 12);
    assert_eq!(a.provenance.teacher_ckpt, format!("{:016x}", teacher.fingerprint()));
    assert_eq!(a.provenance.params, params);
    for r in &a.records {
        assert!(!r.response.is_empty());
        assert_eq!(r.meta["provenance"]["teacher_ckpt"], a.provenance.teacher_ckpt);
        assert!(prompts.iter().any(|p| p.prompt == r.prompt));
    }
    let other = generate_sgr(&teacher, &LayerMask::empty(), &prompts, &SgrParams { seed: 43, ..params.clone() }, &tok).unwrap();
    assert_ne!(a.records, other.records);
    assert!(matches!(
        generate_sgr(&teacher, &LayerMask::new([0]), &prompts, &params, &tok),
        Err(RecoveryError::PrunedTeacher(_))
    ));
}

#[test]
fn warmup_schedule() {
    let h = TrainHyper { warmup: 10, lr: 1e-3, ..TrainHyper::default() };
    assert!(h.lr_at(0) > 0.0 && h.lr_at(0) < h.lr_at(5));
    assert_eq!(h.lr_at(10), 1e-3);
    assert_eq!(h.lr_at(400), 1e-3);
}
