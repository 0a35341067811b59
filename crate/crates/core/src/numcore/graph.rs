//! Reverse-mode autodiff over a linear tape of coarse tensor ops.

use super::kernels;
use super::{NumError, Tensor};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Mean(Var),
    Gelu { x: Var, deriv: Vec<f64> },
    RmsNorm { x: Var, gain: Var, inv_rms: Vec<f64> },
    Softmax { x: Var, axis: usize },
    Embedding { table: Var, ids: Vec<usize> },
    Attention { qkv: Var, layout: AttentionLayout, q: Vec<f64>, k: Vec<f64>, v: Vec<f64>, probs: Vec<f64> },
    CrossEntropy { logits: Var, targets: Vec<usize>, weights: Vec<f64>, total: f64, probs: Vec<f64> },
}

/// How packed rows split into independent causal sequences.
#[derive(Clone, Debug)]
pub struct AttentionLayout {
    /// `(first_row, len)` of each sequence; rows of different sequences never attend to each other.
    pub segments: Vec<(usize, usize)>,
    pub n_heads: usize,
    pub rotary: bool,
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
    grad: Option<Vec<f64>>,
}

/// A single-use compute graph. Build the forward pass with the op methods,
/// call [`Graph::backward`] once, then read gradients off the leaves.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    backward_done: bool,
}

fn check_finite(op: &str, data: &[f64]) -> Result<(), NumError> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(NumError::NonFinite(op.to_string()))
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad, grad: None });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        let mut t = t;
        t.clear_grad();
        self.push(t, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        let mut t = t;
        t.clear_grad();
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Moves a leaf's gradient out, leaving `None` behind.
    pub fn take_grad(&mut self, v: Var) -> Option<Vec<f64>> {
        self.nodes[v.0].grad.take()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        let (m, k) = self.value(a).dims2()?;
        let (k2, n) = self.value(b).dims2()?;
        if k != k2 {
            return Err(NumError::Shape(format!("matmul {m}x{k} by {k2}x{n}")));
        }
        let out = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        check_finite("matmul", &out)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), ng))
    }

    /// `a · bᵀ` with `a: m×k`, `b: n×k`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        let (m, k) = self.value(a).dims2()?;
        let (n, k2) = self.value(b).dims2()?;
        if k != k2 {
            return Err(NumError::Shape(format!("matmul_bt {m}x{k} by ({n}x{k2})ᵀ")));
        }
        let out = kernels::matmul_bt(self.value(a).data(), self.value(b).data(), m, k, n);
        check_finite("matmul_bt", &out)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMulBt(a, b), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(NumError::Shape(format!("add {:?} + {:?}", ta.shape(), tb.shape())));
        }
        let out: Vec<f64> = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        check_finite("add", &out)?;
        let shape = ta.shape().to_vec();
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(shape, out)?, Op::Add(a, b), ng))
    }

    /// Adds a length-`n` bias to every row of an `m×n` matrix.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var, NumError> {
        let (m, n) = self.value(a).dims2()?;
        if self.value(bias).numel() != n {
            return Err(NumError::Shape(format!("bias of length {} for {m}x{n}", self.value(bias).numel())));
        }
        let b = self.value(bias).data();
        let mut out = self.value(a).data().to_vec();
        for row in out.chunks_exact_mut(n) {
            for (o, bv) in row.iter_mut().zip(b) {
                *o += bv;
            }
        }
        check_finite("add_bias", &out)?;
        let shape = self.value(a).shape().to_vec();
        let ng = self.needs(a) || self.needs(bias);
        Ok(self.push(Tensor::new(shape, out)?, Op::AddBias(a, bias), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(NumError::Shape(format!("mul {:?} * {:?}", ta.shape(), tb.shape())));
        }
        let out: Vec<f64> = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        check_finite("mul", &out)?;
        let shape = ta.shape().to_vec();
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(shape, out)?, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var, NumError> {
        let out: Vec<f64> = self.value(a).data().iter().map(|x| x * s).collect();
        check_finite("scale", &out)?;
        let shape = self.value(a).shape().to_vec();
        let ng = self.needs(a);
        Ok(self.push(Tensor::new(shape, out)?, Op::Scale(a, s), ng))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, NumError> {
        let s: f64 = self.value(a).data().iter().sum();
        check_finite("sum", &[s])?;
        let ng = self.needs(a);
        Ok(self.push(Tensor::scalar(s), Op::Sum(a), ng))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, NumError> {
        let t = self.value(a);
        if t.numel() == 0 {
            return Err(NumError::Empty("mean of an empty tensor".into()));
        }
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        check_finite("mean", &[s])?;
        let ng = self.needs(a);
        Ok(self.push(Tensor::scalar(s), Op::Mean(a), ng))
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var, NumError> {
        let xs = self.value(a).data();
        let mut out = Vec::with_capacity(xs.len());
        let mut deriv = Vec::with_capacity(xs.len());
        for &x in xs {
            let (y, dy) = kernels::gelu_with_grad(x);
            out.push(y);
            deriv.push(dy);
        }
        check_finite("gelu", &out)?;
        let shape = self.value(a).shape().to_vec();
        let ng = self.needs(a);
        Ok(self.push(Tensor::new(shape, out)?, Op::Gelu { x: a, deriv }, ng))
    }

    /// Row-wise RMS normalisation of `x: m×d` with gain `d`.
    pub fn rms_norm(&mut self, x: Var, gain: Var) -> Result<Var, NumError> {
        let (m, d) = self.value(x).dims2()?;
        if self.value(gain).numel() != d {
            return Err(NumError::Shape(format!("rms gain of length {} for width {d}", self.value(gain).numel())));
        }
        let xd = self.value(x).data();
        let inv_rms: Vec<f64> = xd.chunks_exact(d).map(kernels::inv_rms_row).collect();
        let out = kernels::rms_norm(xd, self.value(gain).data(), m);
        check_finite("rms_norm", &out)?;
        let shape = self.value(x).shape().to_vec();
        let ng = self.needs(x) || self.needs(gain);
        Ok(self.push(Tensor::new(shape, out)?, Op::RmsNorm { x, gain, inv_rms }, ng))
    }

    /// Max-stabilised softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var, NumError> {
        let t = self.value(x);
        check_finite("softmax input", t.data())?;
        let out = softmax_axis(t.data(), t.shape(), axis)?;
        let shape = t.shape().to_vec();
        let ng = self.needs(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::Softmax { x, axis }, ng))
    }

    /// Gathers rows of `table` (V×d).
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var, NumError> {
        let (v, d) = self.value(table).dims2()?;
        let td = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(NumError::Index(format!("row {id} of a {v}-row table")));
            }
            out.extend_from_slice(&td[id * d..(id + 1) * d]);
        }
        let ng = self.needs(table);
        Ok(self.push(Tensor::new(vec![ids.len(), d], out)?, Op::Embedding { table, ids: ids.to_vec() }, ng))
    }

    /// Multi-head causal self-attention over packed `[q | k | v]` rows (`n × 3d`).
    pub fn attention(&mut self, qkv: Var, layout: AttentionLayout) -> Result<Var, NumError> {
        let (n, three_d) = self.value(qkv).dims2()?;
        if three_d % 3 != 0 || (three_d / 3) % layout.n_heads != 0 {
            return Err(NumError::Shape(format!("attention width {three_d} with {} heads", layout.n_heads)));
        }
        let covered: usize = layout.segments.iter().map(|s| s.1).sum();
        if covered != n || layout.segments.iter().any(|&(s, l)| s + l > n) {
            return Err(NumError::Shape(format!("segments cover {covered} of {n} rows")));
        }
        let d = three_d / 3;
        let (q, k, v) = split_qkv(self.value(qkv).data(), n, d, &layout);
        let mut out = vec![0.0; n * d];
        let probs = attention_forward(&q, &k, &v, d, &layout, &mut out);
        check_finite("attention", &out)?;
        let ng = self.needs(qkv);
        Ok(self.push(Tensor::new(vec![n, d], out)?, Op::Attention { qkv, layout, q, k, v, probs }, ng))
    }

    /// Weighted mean negative log-likelihood of `targets` under row-wise softmax of `logits`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], weights: &[f64]) -> Result<Var, NumError> {
        let (n, vocab) = self.value(logits).dims2()?;
        if targets.len() != n || weights.len() != n {
            return Err(NumError::Shape(format!(
                "{} targets and {} weights for {n} rows",
                targets.len(),
                weights.len()
            )));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= vocab) {
            return Err(NumError::Index(format!("target {t} outside vocabulary of {vocab}")));
        }
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Err(NumError::Empty("cross-entropy with an all-zero mask".into()));
        }
        let ld = self.value(logits).data();
        check_finite("cross_entropy input", ld)?;
        let mut probs = vec![0.0; n * vocab];
        let mut loss = 0.0;
        for i in 0..n {
            let row = &ld[i * vocab..(i + 1) * vocab];
            let pr = &mut probs[i * vocab..(i + 1) * vocab];
            pr.copy_from_slice(row);
            kernels::softmax_in_place(pr);
            if weights[i] != 0.0 {
                let lsm = kernels::log_softmax(row);
                loss -= weights[i] * lsm[targets[i]];
            }
        }
        let loss = loss / total;
        check_finite("cross_entropy", &[loss])?;
        let ng = self.needs(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy { logits, targets: targets.to_vec(), weights: weights.to_vec(), total, probs },
            ng,
        ))
    }

    /// Clears every gradient so `backward` may run again on the same graph.
    pub fn reset_grads(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.backward_done = false;
    }

    fn accumulate(&mut self, v: Var, g: Vec<f64>) {
        let node = &mut self.nodes[v.0];
        if !node.needs_grad {
            return;
        }
        match &mut node.grad {
            Some(existing) => existing.iter_mut().zip(&g).for_each(|(e, x)| *e += x),
            None => node.grad = Some(g),
        }
    }

    /// Back-propagates from a scalar `loss`. Every leaf reachable from the
    /// loss that needs a gradient ends up with one (zeros if unaffected).
    pub fn backward(&mut self, loss: Var) -> Result<(), NumError> {
        if self.backward_done {
            return Err(NumError::DoubleBackward);
        }
        if self.value(loss).numel() != 1 {
            return Err(NumError::Shape(format!("backward from non-scalar {:?}", self.value(loss).shape())));
        }
        self.backward_done = true;
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].needs_grad || matches!(self.nodes[idx].op, Op::Leaf) {
                continue;
            }
            let Some(gout) = self.nodes[idx].grad.take() else { continue };
            let op = std::mem::replace(&mut self.nodes[idx].op, Op::Leaf);
            self.backprop_op(&op, idx, &gout)?;
            self.nodes[idx].op = op;
            self.nodes[idx].grad = Some(gout);
        }
        for node in &mut self.nodes {
            if node.needs_grad && matches!(node.op, Op::Leaf) && node.grad.is_none() {
                node.grad = Some(vec![0.0; node.value.numel()]);
            }
        }
        Ok(())
    }

    fn backprop_op(&mut self, op: &Op, idx: usize, gout: &[f64]) -> Result<(), NumError> {
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2()?;
                let (_, n) = self.value(*b).dims2()?;
                if self.needs(*a) {
                    let ga = kernels::matmul_bt(gout, self.value(*b).data(), m, n, k);
                    self.accumulate(*a, ga);
                }
                if self.needs(*b) {
                    let gb = kernels::matmul_at(self.value(*a).data(), gout, m, k, n);
                    self.accumulate(*b, gb);
                }
            }
            Op::MatMulBt(a, b) => {
                let (m, k) = self.value(*a).dims2()?;
                let (n, _) = self.value(*b).dims2()?;
                if self.needs(*a) {
                    let ga = kernels::matmul(gout, self.value(*b).data(), m, n, k);
                    self.accumulate(*a, ga);
                }
                if self.needs(*b) {
                    let gb = kernels::matmul_at(gout, self.value(*a).data(), m, n, k);
                    self.accumulate(*b, gb);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(*a, gout.to_vec());
                self.accumulate(*b, gout.to_vec());
            }
            Op::AddBias(a, bias) => {
                let n = self.value(*bias).numel();
                let mut gb = vec![0.0; n];
                for row in gout.chunks_exact(n) {
                    gb.iter_mut().zip(row).for_each(|(g, r)| *g += r);
                }
                self.accumulate(*a, gout.to_vec());
                self.accumulate(*bias, gb);
            }
            Op::Mul(a, b) => {
                let ga: Vec<f64> = gout.iter().zip(self.value(*b).data()).map(|(g, y)| g * y).collect();
                let gb: Vec<f64> = gout.iter().zip(self.value(*a).data()).map(|(g, x)| g * x).collect();
                self.accumulate(*a, ga);
                self.accumulate(*b, gb);
            }
            Op::Scale(a, s) => {
                let ga = gout.iter().map(|g| g * s).collect();
                self.accumulate(*a, ga);
            }
            Op::Sum(a) => {
                let n = self.value(*a).numel();
                self.accumulate(*a, vec![gout[0]; n]);
            }
            Op::Mean(a) => {
                let n = self.value(*a).numel();
                self.accumulate(*a, vec![gout[0] / n as f64; n]);
            }
            Op::Gelu { x, deriv } => {
                let ga = gout.iter().zip(deriv).map(|(g, d)| g * d).collect();
                self.accumulate(*x, ga);
            }
            Op::RmsNorm { x, gain, inv_rms } => {
                let (_, d) = self.value(*x).dims2()?;
                let xd = self.value(*x).data();
                let gd = self.value(*gain).data();
                let mut gx = vec![0.0; xd.len()];
                let mut gg = vec![0.0; d];
                for (r, &s) in inv_rms.iter().enumerate() {
                    let xr = &xd[r * d..(r + 1) * d];
                    let go = &gout[r * d..(r + 1) * d];
                    let mut dot = 0.0;
                    for j in 0..d {
                        gg[j] += go[j] * xr[j] * s;
                        dot += go[j] * gd[j] * xr[j];
                    }
                    let c = s * s * s * dot / d as f64;
                    let gxr = &mut gx[r * d..(r + 1) * d];
                    for j in 0..d {
                        gxr[j] = s * gd[j] * go[j] - xr[j] * c;
                    }
                }
                self.accumulate(*x, gx);
                self.accumulate(*gain, gg);
            }
            Op::Softmax { x, axis } => {
                let y = self.nodes[idx].value.data();
                let shape = self.nodes[idx].value.shape();
                let (outer, len, inner) = axis_split(shape, *axis)?;
                let mut gx = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * len + j) * inner + i;
                        let dot: f64 = (0..len).map(|j| y[at(j)] * gout[at(j)]).sum();
                        for j in 0..len {
                            gx[at(j)] = y[at(j)] * (gout[at(j)] - dot);
                        }
                    }
                }
                self.accumulate(*x, gx);
            }
            Op::Embedding { table, ids } => {
                let (v, d) = self.value(*table).dims2()?;
                let mut gt = vec![0.0; v * d];
                for (r, &id) in ids.iter().enumerate() {
                    let dst = &mut gt[id * d..(id + 1) * d];
                    dst.iter_mut().zip(&gout[r * d..(r + 1) * d]).for_each(|(a, b)| *a += b);
                }
                self.accumulate(*table, gt);
            }
            Op::Attention { qkv, layout, q, k, v, probs } => {
                let (n, three_d) = self.value(*qkv).dims2()?;
                let d = three_d / 3;
                let gqkv = attention_backward(q, k, v, probs, gout, n, d, layout);
                self.accumulate(*qkv, gqkv);
            }
            Op::CrossEntropy { logits, targets, weights, total, probs } => {
                let (_, vocab) = self.value(*logits).dims2()?;
                let mut gl = vec![0.0; probs.len()];
                for (i, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                    if w == 0.0 {
                        continue;
                    }
                    let c = gout[0] * w / total;
                    let row = &mut gl[i * vocab..(i + 1) * vocab];
                    for (g, p) in row.iter_mut().zip(&probs[i * vocab..(i + 1) * vocab]) {
                        *g = c * p;
                    }
                    row[t] -= c;
                }
                self.accumulate(*logits, gl);
            }
        }
        Ok(())
    }
}

fn axis_split(shape: &[usize], axis: usize) -> Result<(usize, usize, usize), NumError> {
    if axis >= shape.len().max(1) {
        return Err(NumError::Shape(format!("axis {axis} for shape {shape:?}")));
    }
    if shape.is_empty() {
        return Ok((1, 1, 1));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

/// Softmax along one axis of a row-major tensor.
pub fn softmax_axis(data: &[f64], shape: &[usize], axis: usize) -> Result<Vec<f64>, NumError> {
    let (outer, len, inner) = axis_split(shape, axis)?;
    let mut out = vec![0.0; data.len()];
    let mut buf = vec![0.0; len];
    for o in 0..outer {
        for i in 0..inner {
            for j in 0..len {
                buf[j] = data[(o * len + j) * inner + i];
            }
            kernels::softmax_in_place(&mut buf);
            for j in 0..len {
                out[(o * len + j) * inner + i] = buf[j];
            }
        }
    }
    Ok(out)
}

fn split_qkv(qkv: &[f64], n: usize, d: usize, layout: &AttentionLayout) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut q = Vec::with_capacity(n * d);
    let mut k = Vec::with_capacity(n * d);
    let mut v = Vec::with_capacity(n * d);
    for row in qkv.chunks_exact(3 * d) {
        q.extend_from_slice(&row[..d]);
        k.extend_from_slice(&row[d..2 * d]);
        v.extend_from_slice(&row[2 * d..]);
    }
    if layout.rotary {
        let hd = d / layout.n_heads;
        for &(start, len) in &layout.segments {
            for t in 0..len {
                let r = start + t;
                for h in 0..layout.n_heads {
                    let span = r * d + h * hd..r * d + (h + 1) * hd;
                    kernels::rotate_half_pairs(&mut q[span.clone()], t, false);
                    kernels::rotate_half_pairs(&mut k[span], t, false);
                }
            }
        }
    }
    (q, k, v)
}

fn attention_forward(q: &[f64], k: &[f64], v: &[f64], d: usize, layout: &AttentionLayout, out: &mut [f64]) -> Vec<f64> {
    let hd = d / layout.n_heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let total: usize = layout.segments.iter().map(|&(_, l)| layout.n_heads * l * (l + 1) / 2).sum();
    let mut probs = vec![0.0; total];
    let mut off = 0;
    for &(start, len) in &layout.segments {
        for h in 0..layout.n_heads {
            let base = start * d + h * hd;
            for t in 0..len {
                let r = start + t;
                let qrow = &q[r * d + h * hd..r * d + (h + 1) * hd];
                let orow = &mut out[r * d + h * hd..r * d + (h + 1) * hd];
                kernels::attend_row(qrow, &k[base..], &v[base..], d, t + 1, scale, &mut probs[off..off + t + 1], orow);
                off += t + 1;
            }
        }
    }
    probs
}

#[allow(clippy::too_many_arguments)]
fn attention_backward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    probs: &[f64],
    gout: &[f64],
    n: usize,
    d: usize,
    layout: &AttentionLayout,
) -> Vec<f64> {
    let hd = d / layout.n_heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let mut gq = vec![0.0; n * d];
    let mut gk = vec![0.0; n * d];
    let mut gv = vec![0.0; n * d];
    let mut dp = Vec::new();
    let mut off = 0;
    for &(start, len) in &layout.segments {
        for h in 0..layout.n_heads {
            for t in 0..len {
                let r = start + t;
                let p = &probs[off..off + t + 1];
                off += t + 1;
                let go = &gout[r * d + h * hd..r * d + (h + 1) * hd];
                dp.clear();
                let mut weighted = 0.0;
                for s in 0..=t {
                    let vs = (start + s) * d + h * hd;
                    let vrow = &v[vs..vs + hd];
                    let dot = kernels::dot(go, vrow);
                    dp.push(dot);
                    weighted += p[s] * dot;
                    kernels::axpy(&mut gv[vs..vs + hd], p[s], go);
                }
                let qs = r * d + h * hd;
                for s in 0..=t {
                    let ds = p[s] * (dp[s] - weighted) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    let ks = (start + s) * d + h * hd;
                    kernels::axpy(&mut gq[qs..qs + hd], ds, &k[ks..ks + hd]);
                    kernels::axpy(&mut gk[ks..ks + hd], ds, &q[qs..qs + hd]);
                }
            }
        }
    }
    if layout.rotary {
        for &(start, len) in &layout.segments {
            for t in 0..len {
                let r = start + t;
                for h in 0..layout.n_heads {
                    let span = r * d + h * hd..r * d + (h + 1) * hd;
                    kernels::rotate_half_pairs(&mut gq[span.clone()], t, true);
                    kernels::rotate_half_pairs(&mut gk[span], t, true);
                }
            }
        }
    }
    let mut g = Vec::with_capacity(n * 3 * d);
    for r in 0..n {
        g.extend_from_slice(&gq[r * d..(r + 1) * d]);
        g.extend_from_slice(&gk[r * d..(r + 1) * d]);
        g.extend_from_slice(&gv[r * d..(r + 1) * d]);
    }
    g
}
