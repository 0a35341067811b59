//! Helpers shared by the integration tests.
#![allow(dead_code)]

use prunelab::model::{Model, ModelConfig, PosScheme};
use prunelab::numcore::{AttentionLayout, Graph, NumError, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const EPS: f64 = 1e-5;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>, scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-scale..scale)).collect()).unwrap()
}

pub fn tiny_model(layers: usize, seed: u64) -> Model {
    let cfg = ModelConfig {
        n_layers: layers,
        d_model: 16,
        n_heads: 2,
        d_ff: 32,
        vocab_size: 24,
        max_seq: 64,
        pos_scheme: PosScheme::Learned,
        tie_embeddings: true,
        seed,
    };
    Model::init(cfg).unwrap()
}

/// Worst norm-wise relative error between backprop and central differences
/// over every input. `inputs` are perturbed one entry at a time.
pub fn gradcheck<F>(inputs: &[Tensor], build: &F) -> f64
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var, NumError>,
{
    let eval = |vals: &[Tensor]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|t| g.constant(t.clone())).collect();
        let out = build(&mut g, &vars).unwrap();
        g.value(out).item().unwrap()
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = build(&mut g, &vars).unwrap();
    g.backward(out).unwrap();
    let mut worst: f64 = 0.0;
    for (i, t) in inputs.iter().enumerate() {
        let analytic = g.grad(vars[i]).expect("leaf gradient").to_vec();
        let mut numeric = vec![0.0; t.numel()];
        for j in 0..t.numel() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += EPS;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= EPS;
            numeric[j] = (eval(&plus) - eval(&minus)) / (2.0 * EPS);
        }
        let diff: f64 = analytic.iter().zip(&numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
        let na: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
        let nn: f64 = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
        let denom = na.max(nn);
        let rel = if denom < 1e-12 { diff } else { diff / denom };
        worst = worst.max(rel);
    }
    worst
}

/// Reduces an op's output to a scalar with fixed random weights, so every
/// output entry influences the loss differently.
pub fn weighted_sum(g: &mut Graph, x: Var, w: &Tensor) -> Result<Var, NumError> {
    let wv = g.constant(w.clone());
    let p = g.mul(x, wv)?;
    g.sum(p)
}

pub const OPS: [&str; 14] = [
    "matmul", "matmul_bt", "add", "add_bias", "mul", "scale", "sum", "mean", "gelu", "rms_norm", "softmax",
    "embedding", "attention", "cross_entropy",
];

/// One random instance of `op`; returns the worst relative error.
pub fn check_op(op: &str, rng: &mut ChaCha8Rng) -> f64 {
    let m = rng.gen_range(1..6);
    let k = rng.gen_range(1..7);
    let n = rng.gen_range(1..6);
    let r = |rng: &mut ChaCha8Rng, s: Vec<usize>| random_tensor(rng, s, 1.0);
    match op {
        "matmul" => {
            let (a, b, w) = (r(rng, vec![m, k]), r(rng, vec![k, n]), r(rng, vec![m, n]));
            gradcheck(&[a, b], &(move |g: &mut Graph, v: &[Var]| {
                let y = g.matmul(v[0], v[1])?;
                weighted_sum(g, y, &w)
            }))
        }
        "matmul_bt" => {
            let (a, b, w) = (r(rng, vec![m, k]), r(rng, vec![n, k]), r(rng, vec![m, n]));
            gradcheck(&[a, b], &(move |g: &mut Graph, v: &[Var]| {
                let y = g.matmul_bt(v[0], v[1])?;
                weighted_sum(g, y, &w)
            }))
        }
        "add" | "mul" => {
            let (a, b, w) = (r(rng, vec![m, n]), r(rng, vec![m, n]), r(rng, vec![m, n]));
            let is_add = op == "add";
            gradcheck(&[a, b], &(move |g: &mut Graph, v: &[Var]| {
                let y = if is_add { g.add(v[0], v[1])? } else { g.mul(v[0], v[1])? };
                weighted_sum(g, y, &w)
            }))
        }
        "add_bias" => {
            let (a, b, w) = (r(rng, vec![m, n]), r(rng, vec![n]), r(rng, vec![m, n]));
            gradcheck(&[a, b], &(move |g: &mut Graph, v: &[Var]| {
                let y = g.add_bias(v[0], v[1])?;
                weighted_sum(g, y, &w)
            }))
        }
        "scale" => {
            let (a, w) = (r(rng, vec![m, n]), r(rng, vec![m, n]));
            let s = rng.gen_range(-3.0..3.0);
            gradcheck(&[a], &(move |g: &mut Graph, v: &[Var]| {
                let y = g.scale(v[0], s)?;
                weighted_sum(g, y, &w)
            }))
        }
        "sum" | "mean" => {
            let a = r(rng, vec![m, n]);
            let is_sum = op == "sum";
            gradcheck(&[a], &(move |g: &mut Graph, v: &[Var]| {
                let sq = g.mul(v[0], v[0])?;
                if is_sum {
                    g.sum(sq)
                } else {
                    g.mean(sq)
                }
            }))
        }
        "gelu" => {
            let (a, w) = (random_tensor(rng, vec![m, n], 4.0), r(rng, vec![m, n]));
            gradcheck(&[a], &(move |g: &mut Graph, v: &[Var]| {
                let y = g.gelu(v[0])?;
                weighted_sum(g, y, &w)
            }))
        }
        "rms_norm" => {
            let (a, gain, w) = (r(rng, vec![m, k]), r(rng, vec![k]), r(rng, vec![m, k]));
            gradcheck(&[a, gain], &(move |g: &mut Graph, v: &[Var]| {
                let y = g.rms_norm(v[0], v[1])?;
                weighted_sum(g, y, &w)
            }))
        }
        "softmax" => {
            let (a, w) = (random_tensor(rng, vec![m, n], 3.0), r(rng, vec![m, n]));
            let axis = rng.gen_range(0..2);
            gradcheck(&[a], &(move |g: &mut Graph, v: &[Var]| {
                let y = g.softmax(v[0], axis)?;
                weighted_sum(g, y, &w)
            }))
        }
        "embedding" => {
            let table = r(rng, vec![n + 1, k]);
            let ids: Vec<usize> = (0..m + 2).map(|_| rng.gen_range(0..n + 1)).collect();
            let w = r(rng, vec![ids.len(), k]);
            gradcheck(&[table], &(move |g: &mut Graph, v: &[Var]| {
                let y = g.embedding(v[0], &ids)?;
                weighted_sum(g, y, &w)
            }))
        }
        "attention" => {
            let heads = rng.gen_range(1..3);
            let hd = 2 * rng.gen_range(1..3);
            let d = heads * hd;
            let first = rng.gen_range(1..5);
            let second = rng.gen_range(0..4);
            let rows = first + second;
            let mut segments = vec![(0, first)];
            if second > 0 {
                segments.push((first, second));
            }
            let rotary = rng.gen_bool(0.5);
            let (qkv, w) = (r(rng, vec![rows, 3 * d]), r(rng, vec![rows, d]));
            gradcheck(&[qkv], &(move |g: &mut Graph, v: &[Var]| {
                let layout = AttentionLayout { segments: segments.clone(), n_heads: heads, rotary };
                let y = g.attention(v[0], layout)?;
                weighted_sum(g, y, &w)
            }))
        }
        "cross_entropy" => {
            let logits = random_tensor(rng, vec![m, n + 1], 3.0);
            let targets: Vec<usize> = (0..m).map(|_| rng.gen_range(0..n + 1)).collect();
            let mut weights: Vec<f64> = (0..m).map(|_| if rng.gen_bool(0.7) { 1.0 } else { 0.0 }).collect();
            weights[0] = 1.0;
            gradcheck(&[logits], &(move |g: &mut Graph, v: &[Var]| g.cross_entropy(v[0], &targets, &weights)))
        }
        other => panic!("unknown op {other}"),
    }
}

/// A random small config (learned or rotary positions, tied or untied head).
pub fn random_config(rng: &mut ChaCha8Rng) -> ModelConfig {
    let n_heads = rng.gen_range(1..4);
    let head = 2 * rng.gen_range(1..5);
    ModelConfig {
        n_layers: rng.gen_range(2..7),
        d_model: n_heads * head,
        n_heads,
        d_ff: rng.gen_range(4..40),
        vocab_size: rng.gen_range(16..30),
        max_seq: 64,
        pos_scheme: if rng.gen_bool(0.5) { PosScheme::Learned } else { PosScheme::Rotary },
        tie_embeddings: rng.gen_bool(0.5),
        seed: rng.gen(),
    }
}

/// Scales every weight so that activations are far from the tiny-init regime.
pub fn roughen(model: &mut Model, rng: &mut ChaCha8Rng) {
    for t in model.weights.tensors_mut() {
        for v in t.data_mut() {
            *v += rng.gen_range(-0.3..0.3);
        }
    }
}

fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[i * n + j] = (0..k).map(|p| a[i * k + p] * b[p * n + j]).sum();
        }
    }
    out
}

fn naive_rms(x: &[f64], gain: &[f64]) -> Vec<f64> {
    let d = gain.len();
    x.chunks(d)
        .flat_map(|row| {
            let r = (row.iter().map(|v| v * v).sum::<f64>() / d as f64 + 1e-6).sqrt();
            row.iter().zip(gain).map(move |(v, g)| v / r * g)
        })
        .collect()
}

fn naive_gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

/// Straight-line reference forward pass (learned positions only), written
/// independently of the library kernels.
pub fn naive_logits(model: &Model, tokens: &[usize], skip: &[usize]) -> Vec<f64> {
    naive_run(model, tokens, skip).1
}

/// Residual stream before the first block and after every block, flattened
/// `[T * d]`, from the reference forward.
pub fn naive_hidden(model: &Model, tokens: &[usize]) -> Vec<Vec<f64>> {
    naive_run(model, tokens, &[]).0
}

fn naive_run(model: &Model, tokens: &[usize], skip: &[usize]) -> (Vec<Vec<f64>>, Vec<f64>) {
    let c = &model.config;
    assert_eq!(c.pos_scheme, PosScheme::Learned);
    let w = &model.weights;
    let (d, t, hd) = (c.d_model, tokens.len(), c.d_model / c.n_heads);
    let pos = w.pos_embedding.as_ref().unwrap().data();
    let emb = w.embedding.data();
    let mut x: Vec<f64> = Vec::new();
    for (i, &tok) in tokens.iter().enumerate() {
        x.extend((0..d).map(|j| emb[tok * d + j] + pos[i * d + j]));
    }
    let mut states = vec![x.clone()];
    for (l, b) in w.blocks.iter().enumerate() {
        if skip.contains(&l) {
            continue;
        }
        let a = naive_rms(&x, b.attn_norm.data());
        let qkv = naive_matmul(&a, b.w_qkv.data(), t, d, 3 * d);
        let mut att = vec![0.0; t * d];
        for h in 0..c.n_heads {
            for i in 0..t {
                let q = &qkv[i * 3 * d + h * hd..i * 3 * d + (h + 1) * hd];
                let scores: Vec<f64> = (0..=i)
                    .map(|j| {
                        let k = &qkv[j * 3 * d + d + h * hd..j * 3 * d + d + (h + 1) * hd];
                        q.iter().zip(k).map(|(x, y)| x * y).sum::<f64>() / (hd as f64).sqrt()
                    })
                    .collect();
                let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
                let z: f64 = e.iter().sum();
                for (j, p) in e.iter().enumerate() {
                    for u in 0..hd {
                        att[i * d + h * hd + u] += p / z * qkv[j * 3 * d + 2 * d + h * hd + u];
                    }
                }
            }
        }
        let o = naive_matmul(&att, b.w_o.data(), t, d, d);
        x.iter_mut().zip(&o).for_each(|(a, b)| *a += b);
        let f = naive_rms(&x, b.ffn_norm.data());
        let u: Vec<f64> = naive_matmul(&f, b.w_up.data(), t, d, c.d_ff).into_iter().map(naive_gelu).collect();
        let dn = naive_matmul(&u, b.w_down.data(), t, c.d_ff, d);
        x.iter_mut().zip(&dn).for_each(|(a, b)| *a += b);
        states.push(x.clone());
    }
    let xn = naive_rms(&x, w.final_norm.data());
    let logits = match &w.head {
        Some(h) => naive_matmul(&xn, h.data(), t, d, c.vocab_size),
        None => {
            let mut out = vec![0.0; t * c.vocab_size];
            for i in 0..t {
                for v in 0..c.vocab_size {
                    out[i * c.vocab_size + v] = (0..d).map(|j| xn[i * d + j] * emb[v * d + j]).sum();
                }
            }
            out
        }
    };
    (states, logits)
}

pub fn random_tokens(rng: &mut ChaCha8Rng, vocab: usize, len: usize) -> Vec<usize> {
    (0..len).map(|_| rng.gen_range(0..vocab)).collect()
}

/// Random mask removing between 1 and L-1 blocks.
pub fn random_mask(rng: &mut ChaCha8Rng, layers: usize) -> Vec<usize> {
    let k = rng.gen_range(1..layers);
    let mut all: Vec<usize> = (0..layers).collect();
    use rand::seq::SliceRandom;
    all.shuffle(rng);
    let mut m = all[..k].to_vec();
    m.sort_unstable();
    m
}

/// Criterion check shared by the model tests and the acceptance target:
/// the empty mask matches the unmasked path bit for bit and a masked model
/// matches the physically rebuilt one bit for bit.
pub fn mask_equivalence(seed: u64) -> Result<(), String> {
    use prunelab::model::LayerMask;
    let mut r = rng(seed);
    let cfg = random_config(&mut r);
    let mut model = Model::init(cfg.clone()).unwrap();
    roughen(&mut model, &mut r);
    let len = r.gen_range(1..20);
    let tokens = random_tokens(&mut r, cfg.vocab_size, len);
    let base = model.forward(&tokens, &LayerMask::empty()).unwrap();
    let again = model.without_layers(&[]).forward(&tokens, &LayerMask::empty()).unwrap();
    if base.logits.data().iter().zip(again.logits.data()).any(|(a, b)| a.to_bits() != b.to_bits()) {
        return Err(format!("seed {seed}: empty mask differs from the unpruned model"));
    }
    let removed = random_mask(&mut r, cfg.n_layers);
    let masked = model.forward(&tokens, &LayerMask::new(removed.iter().copied())).unwrap();
    let rebuilt = model.without_layers(&removed);
    if rebuilt.n_layers() != cfg.n_layers - removed.len() {
        return Err(format!("seed {seed}: rebuilt model has {} layers", rebuilt.n_layers()));
    }
    let phys = rebuilt.forward(&tokens, &LayerMask::empty()).unwrap();
    if masked.logits.data().iter().zip(phys.logits.data()).any(|(a, b)| a.to_bits() != b.to_bits()) {
        return Err(format!("seed {seed}: mask {removed:?} differs from the rebuilt model"));
    }
    Ok(())
}

pub mod checks;
pub mod oracle;

/// A small untrained model over the character tokenizer's vocabulary.
pub fn char_model(layers: usize, seed: u64) -> Model {
    let vocab = prunelab::corpora::Tokenizer::new().vocab_size();
    let cfg = ModelConfig {
        n_layers: layers,
        d_model: 16,
        n_heads: 2,
        d_ff: 32,
        vocab_size: vocab,
        max_seq: 128,
        pos_scheme: PosScheme::Learned,
        tie_embeddings: true,
        seed,
    };
    Model::init(cfg).unwrap()
}
