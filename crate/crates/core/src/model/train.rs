//! Differentiable forward pass recorded on a [`Graph`].

use super::{LayerMask, Model, ModelError, TransformerWeights};
use crate::numcore::{AttentionLayout, Graph, NumError, Tensor, Var};

/// Graph handles for every weight, in checkpoint declaration order.
pub struct BlockVars {
    pub attn_norm: Var,
    pub w_qkv: Var,
    pub w_o: Var,
    pub ffn_norm: Var,
    pub w_up: Var,
    pub w_down: Var,
}

pub struct ModelVars {
    pub embedding: Var,
    pub pos_embedding: Option<Var>,
    pub blocks: Vec<BlockVars>,
    pub final_norm: Var,
    pub head: Option<Var>,
}

impl ModelVars {
    /// Puts the weights on the graph, as parameters or as frozen constants.
    pub fn bind(g: &mut Graph, w: &TransformerWeights, trainable: bool) -> Self {
        let mut leaf = |t: &Tensor| if trainable { g.param(t.clone()) } else { g.constant(t.clone()) };
        let embedding = leaf(&w.embedding);
        let pos_embedding = w.pos_embedding.as_ref().map(&mut leaf);
        let blocks = w
            .blocks
            .iter()
            .map(|b| BlockVars {
                attn_norm: leaf(&b.attn_norm),
                w_qkv: leaf(&b.w_qkv),
                w_o: leaf(&b.w_o),
                ffn_norm: leaf(&b.ffn_norm),
                w_up: leaf(&b.w_up),
                w_down: leaf(&b.w_down),
            })
            .collect();
        let final_norm = leaf(&w.final_norm);
        let head = w.head.as_ref().map(&mut leaf);
        Self { embedding, pos_embedding, blocks, final_norm, head }
    }

    pub fn vars(&self) -> Vec<Var> {
        let mut out = vec![self.embedding];
        out.extend(self.pos_embedding);
        for b in &self.blocks {
            out.extend([b.attn_norm, b.w_qkv, b.w_o, b.ffn_norm, b.w_up, b.w_down]);
        }
        out.push(self.final_norm);
        out.extend(self.head);
        out
    }

    /// Moves gradients from the graph onto the matching weight tensors.
    pub fn export_grads(&self, g: &mut Graph, w: &mut TransformerWeights) -> Result<(), NumError> {
        for (var, t) in self.vars().into_iter().zip(w.tensors_mut()) {
            match g.take_grad(var) {
                Some(grad) => t.set_grad(grad)?,
                None => t.clear_grad(),
            }
        }
        Ok(())
    }
}

/// A low-rank update `x·A·B·scale` added to one projection.
#[derive(Clone, Copy, Debug)]
pub struct AdapterVars {
    pub a: Var,
    pub b: Var,
    pub scale: f64,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct BlockAdapterVars {
    pub qkv: Option<AdapterVars>,
    pub o: Option<AdapterVars>,
    pub up: Option<AdapterVars>,
    pub down: Option<AdapterVars>,
}

/// Several token sequences packed row-wise for one training step.
#[derive(Clone, Debug, Default)]
pub struct PackedBatch {
    pub inputs: Vec<usize>,
    pub positions: Vec<usize>,
    pub targets: Vec<usize>,
    pub weights: Vec<f64>,
    pub segments: Vec<(usize, usize)>,
}

impl PackedBatch {
    /// Adds a sequence; `loss_mask[i]` says whether token `i` is a target.
    pub fn push(&mut self, tokens: &[usize], loss_mask: &[bool]) {
        assert_eq!(tokens.len(), loss_mask.len());
        if tokens.len() < 2 {
            return;
        }
        let start = self.inputs.len();
        let n = tokens.len() - 1;
        self.inputs.extend_from_slice(&tokens[..n]);
        self.positions.extend(0..n);
        self.targets.extend_from_slice(&tokens[1..]);
        self.weights.extend(loss_mask[1..].iter().map(|&m| if m { 1.0 } else { 0.0 }));
        self.segments.push((start, n));
    }

    pub fn rows(&self) -> usize {
        self.inputs.len()
    }

    pub fn target_count(&self) -> f64 {
        self.weights.iter().sum()
    }
}

fn linear(g: &mut Graph, x: Var, w: Var, adapter: Option<AdapterVars>) -> Result<Var, NumError> {
    let base = g.matmul(x, w)?;
    match adapter {
        None => Ok(base),
        Some(ad) => {
            let xa = g.matmul(x, ad.a)?;
            let xab = g.matmul(xa, ad.b)?;
            let scaled = g.scale(xab, ad.scale)?;
            g.add(base, scaled)
        }
    }
}

impl Model {
    /// Records the forward pass for a packed batch and returns the logits
    /// variable (`rows × V`).
    pub fn graph_logits(
        &self,
        g: &mut Graph,
        vars: &ModelVars,
        batch: &PackedBatch,
        mask: &LayerMask,
        adapters: Option<&[BlockAdapterVars]>,
    ) -> Result<Var, ModelError> {
        let cfg = &self.config;
        mask.validate(vars.blocks.len())?;
        if let Some(&t) = batch.inputs.iter().find(|&&t| t >= cfg.vocab_size) {
            return Err(ModelError::Vocab { token: t, vocab: cfg.vocab_size });
        }
        if let Some(&(_, len)) = batch.segments.iter().find(|s| s.1 > cfg.max_seq) {
            return Err(ModelError::Length { len, max: cfg.max_seq });
        }
        let mut x = g.embedding(vars.embedding, &batch.inputs)?;
        if let Some(pos) = vars.pos_embedding {
            let p = g.embedding(pos, &batch.positions)?;
            x = g.add(x, p)?;
        }
        let layout = AttentionLayout {
            segments: batch.segments.clone(),
            n_heads: cfg.n_heads,
            rotary: vars.pos_embedding.is_none(),
        };
        for (l, b) in vars.blocks.iter().enumerate() {
            if mask.contains(l) {
                continue;
            }
            let ad = adapters.and_then(|a| a.get(l)).copied().unwrap_or_default();
            let a = g.rms_norm(x, b.attn_norm)?;
            let qkv = linear(g, a, b.w_qkv, ad.qkv)?;
            let att = g.attention(qkv, layout.clone())?;
            let o = linear(g, att, b.w_o, ad.o)?;
            x = g.add(x, o)?;
            let f = g.rms_norm(x, b.ffn_norm)?;
            let u = linear(g, f, b.w_up, ad.up)?;
            let u = g.gelu(u)?;
            let dn = linear(g, u, b.w_down, ad.down)?;
            x = g.add(x, dn)?;
        }
        let xn = g.rms_norm(x, vars.final_norm)?;
        let logits = match vars.head {
            Some(h) => g.matmul(xn, h)?,
            None => g.matmul_bt(xn, vars.embedding)?,
        };
        Ok(logits)
    }

    /// Masked next-token cross-entropy of a packed batch.
    pub fn graph_loss(
        &self,
        g: &mut Graph,
        vars: &ModelVars,
        batch: &PackedBatch,
        mask: &LayerMask,
        adapters: Option<&[BlockAdapterVars]>,
    ) -> Result<Var, ModelError> {
        let logits = self.graph_logits(g, vars, batch, mask, adapters)?;
        Ok(g.cross_entropy(logits, &batch.targets, &batch.weights)?)
    }
}
