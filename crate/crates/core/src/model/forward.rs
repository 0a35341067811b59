//! Inference path. A full forward pass is a single prefill through the same
//! cached decoder used for generation, so both agree bitwise.

use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{LayerMask, Model, ModelError};
use crate::numcore::kernels;
use crate::numcore::Tensor;

pub struct ForwardOutput {
    /// `T × V`.
    pub logits: Tensor,
    /// Residual stream at every block boundary: entry `ℓ` is the input to
    /// block `ℓ`, entry `L` is the output of the last block (before the final
    /// norm). A skipped block leaves `hidden[ℓ+1] == hidden[ℓ]`.
    pub hidden: Vec<Tensor>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationParams {
    pub max_new_tokens: usize,
    /// 0 means greedy decoding.
    pub temperature: f64,
    pub seed: u64,
    pub stop_token: Option<usize>,
}

impl GenerationParams {
    pub fn greedy(max_new_tokens: usize, stop_token: Option<usize>) -> Self {
        Self { max_new_tokens, temperature: 0.0, seed: 0, stop_token }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.max_new_tokens == 0 {
            return Err(ModelError::Config("max_new_tokens must be at least 1".into()));
        }
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(ModelError::Config(format!("invalid temperature {}", self.temperature)));
        }
        Ok(())
    }
}

/// Log-probabilities over (a subset of) the vocabulary at one position,
/// sorted by token id.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenDistribution {
    entries: Vec<(usize, f64)>,
}

impl TokenDistribution {
    pub fn entries(&self) -> &[(usize, f64)] {
        &self.entries
    }

    pub fn logprob(&self, token: usize) -> Option<f64> {
        self.entries.binary_search_by_key(&token, |e| e.0).ok().map(|i| self.entries[i].1)
    }

    /// Most likely token; ties go to the smaller id.
    pub fn argmax(&self) -> usize {
        let mut best = self.entries[0];
        for &e in &self.entries[1..] {
            if e.1 > best.1 {
                best = e;
            }
        }
        best.0
    }
}

/// Per-layer key/value cache over the kept blocks.
pub struct DecodeState<'a> {
    model: &'a Model,
    mask: LayerMask,
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
    len: usize,
}

impl<'a> DecodeState<'a> {
    pub fn new(model: &'a Model, mask: &LayerMask) -> Result<Self, ModelError> {
        mask.validate(model.weights.blocks.len())?;
        let l = model.weights.blocks.len();
        Ok(Self { model, mask: mask.clone(), keys: vec![Vec::new(); l], values: vec![Vec::new(); l], len: 0 })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Appends `tokens` to the context. Returns logits for the new rows
    /// (`n × V`) and, when asked, boundary hidden states for them.
    pub fn extend(&mut self, tokens: &[usize], with_hidden: bool) -> Result<(Vec<f64>, Vec<Vec<f64>>), ModelError> {
        let cfg = &self.model.config;
        let w = &self.model.weights;
        let d = cfg.d_model;
        let n = tokens.len();
        if self.len + n > cfg.max_seq {
            return Err(ModelError::Length { len: self.len + n, max: cfg.max_seq });
        }
        if let Some(&t) = tokens.iter().find(|&&t| t >= cfg.vocab_size) {
            return Err(ModelError::Vocab { token: t, vocab: cfg.vocab_size });
        }
        let emb = w.embedding.data();
        let mut x = Vec::with_capacity(n * d);
        for (i, &t) in tokens.iter().enumerate() {
            let row = &emb[t * d..(t + 1) * d];
            match &w.pos_embedding {
                Some(pos) => {
                    let p = &pos.data()[(self.len + i) * d..(self.len + i + 1) * d];
                    x.extend(row.iter().zip(p).map(|(a, b)| a + b));
                }
                None => x.extend_from_slice(row),
            }
        }
        let mut hidden = Vec::new();
        let hd = cfg.head_dim();
        let scale = 1.0 / (hd as f64).sqrt();
        let rotary = w.pos_embedding.is_none();
        let mut probs = vec![0.0; self.len + n];
        for (l, block) in w.blocks.iter().enumerate() {
            if with_hidden {
                hidden.push(x.clone());
            }
            if self.mask.contains(l) {
                continue;
            }
            let a = kernels::rms_norm(&x, block.attn_norm.data(), n);
            let qkv = kernels::matmul(&a, block.w_qkv.data(), n, d, 3 * d);
            let mut q = Vec::with_capacity(n * d);
            for (i, row) in qkv.chunks_exact(3 * d).enumerate() {
                let mut qr = row[..d].to_vec();
                let mut kr = row[d..2 * d].to_vec();
                if rotary {
                    for h in 0..cfg.n_heads {
                        kernels::rotate_half_pairs(&mut qr[h * hd..(h + 1) * hd], self.len + i, false);
                        kernels::rotate_half_pairs(&mut kr[h * hd..(h + 1) * hd], self.len + i, false);
                    }
                }
                q.extend_from_slice(&qr);
                self.keys[l].extend_from_slice(&kr);
                self.values[l].extend_from_slice(&row[2 * d..]);
            }
            let mut att = vec![0.0; n * d];
            for i in 0..n {
                let ctx = self.len + i + 1;
                for h in 0..cfg.n_heads {
                    kernels::attend_row(
                        &q[i * d + h * hd..i * d + (h + 1) * hd],
                        &self.keys[l][h * hd..],
                        &self.values[l][h * hd..],
                        d,
                        ctx,
                        scale,
                        &mut probs[..ctx],
                        &mut att[i * d + h * hd..i * d + (h + 1) * hd],
                    );
                }
            }
            let o = kernels::matmul(&att, block.w_o.data(), n, d, d);
            x.iter_mut().zip(&o).for_each(|(a, b)| *a += b);
            let f = kernels::rms_norm(&x, block.ffn_norm.data(), n);
            let mut u = kernels::matmul(&f, block.w_up.data(), n, d, cfg.d_ff);
            u.iter_mut().for_each(|v| *v = kernels::gelu(*v));
            let dn = kernels::matmul(&u, block.w_down.data(), n, cfg.d_ff, d);
            x.iter_mut().zip(&dn).for_each(|(a, b)| *a += b);
        }
        if with_hidden {
            hidden.push(x.clone());
        }
        self.len += n;
        let xn = kernels::rms_norm(&x, w.final_norm.data(), n);
        let logits = match &w.head {
            Some(head) => kernels::matmul(&xn, head.data(), n, d, cfg.vocab_size),
            None => kernels::matmul_bt(&xn, emb, n, d, cfg.vocab_size),
        };
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::Num(crate::numcore::NumError::NonFinite("forward".into())));
        }
        Ok((logits, hidden))
    }
}

impl Model {
    /// Full forward pass over `tokens` with the blocks in `mask` skipped.
    pub fn forward(&self, tokens: &[usize], mask: &LayerMask) -> Result<ForwardOutput, ModelError> {
        if tokens.is_empty() {
            return Err(ModelError::Length { len: 0, max: self.config.max_seq });
        }
        let mut state = DecodeState::new(self, mask)?;
        let (logits, hidden) = state.extend(tokens, true)?;
        let (t, d, v) = (tokens.len(), self.config.d_model, self.config.vocab_size);
        Ok(ForwardOutput {
            logits: Tensor::new(vec![t, v], logits)?,
            hidden: hidden.into_iter().map(|h| Tensor::new(vec![t, d], h)).collect::<Result<_, _>>()?,
        })
    }

    /// Logits only, skipping hidden-state capture.
    pub fn logits(&self, tokens: &[usize], mask: &LayerMask) -> Result<Vec<f64>, ModelError> {
        if tokens.is_empty() {
            return Err(ModelError::Length { len: 0, max: self.config.max_seq });
        }
        let mut state = DecodeState::new(self, mask)?;
        Ok(state.extend(tokens, false)?.0)
    }

    /// Sum of log-probabilities of `tokens[span]`, each conditioned on its prefix.
    pub fn sequence_logprob(&self, tokens: &[usize], mask: &LayerMask, span: Range<usize>) -> Result<f64, ModelError> {
        if span.is_empty() {
            return Err(ModelError::EmptySpan);
        }
        if span.start == 0 || span.end > tokens.len() {
            return Err(ModelError::Span(format!("{span:?} in a sequence of {}", tokens.len())));
        }
        let v = self.config.vocab_size;
        let logits = self.logits(&tokens[..span.end], mask)?;
        let mut total = 0.0;
        for p in span {
            let row = &logits[(p - 1) * v..p * v];
            total += kernels::log_softmax(row)[tokens[p]];
        }
        Ok(total)
    }

    /// Next-token log-probabilities after `prompt`, optionally renormalised
    /// over a restricted token set.
    pub fn next_token_distribution(
        &self,
        prompt: &[usize],
        mask: &LayerMask,
        restrict: Option<&[usize]>,
    ) -> Result<TokenDistribution, ModelError> {
        if prompt.is_empty() {
            return Err(ModelError::EmptyPrompt);
        }
        let logits = self.logits(prompt, mask)?;
        let v = self.config.vocab_size;
        let last = &logits[(prompt.len() - 1) * v..];
        restricted_logprobs(last, restrict)
    }

    /// Autoregressive decoding. The stop token, if produced, is not included.
    pub fn generate(&self, prompt: &[usize], mask: &LayerMask, params: &GenerationParams) -> Result<Vec<usize>, ModelError> {
        params.validate()?;
        if prompt.is_empty() {
            return Err(ModelError::EmptyPrompt);
        }
        let v = self.config.vocab_size;
        let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
        let mut state = DecodeState::new(self, mask)?;
        let (logits, _) = state.extend(prompt, false)?;
        let mut last = logits[(prompt.len() - 1) * v..].to_vec();
        let mut out = Vec::new();
        for _ in 0..params.max_new_tokens {
            let next = if params.temperature == 0.0 {
                argmax(&last)
            } else {
                sample(&last, params.temperature, &mut rng)
            };
            if Some(next) == params.stop_token {
                break;
            }
            out.push(next);
            if state.len() >= self.config.max_seq {
                break;
            }
            last = state.extend(&[next], false)?.0;
        }
        Ok(out)
    }
}

pub(crate) fn restricted_logprobs(logits: &[f64], restrict: Option<&[usize]>) -> Result<TokenDistribution, ModelError> {
    let mut entries: Vec<(usize, f64)> = match restrict {
        None => kernels::log_softmax(logits).into_iter().enumerate().collect(),
        Some(set) => {
            let mut ids: Vec<usize> = set.to_vec();
            ids.sort_unstable();
            ids.dedup();
            if ids.is_empty() {
                return Err(ModelError::EmptyRestrict);
            }
            if let Some(&t) = ids.iter().find(|&&t| t >= logits.len()) {
                return Err(ModelError::Vocab { token: t, vocab: logits.len() });
            }
            let sub: Vec<f64> = ids.iter().map(|&t| logits[t]).collect();
            ids.into_iter().zip(kernels::log_softmax(&sub)).collect()
        }
    };
    entries.sort_by_key(|e| e.0);
    Ok(TokenDistribution { entries })
}

/// Index of the largest logit; ties go to the smaller index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn sample(logits: &[f64], temperature: f64, rng: &mut ChaCha8Rng) -> usize {
    let mut p: Vec<f64> = logits.iter().map(|l| l / temperature).collect();
    kernels::softmax_in_place(&mut p);
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, pi) in p.iter().enumerate() {
        acc += pi;
        if u < acc {
            return i;
        }
    }
    p.len() - 1
}
