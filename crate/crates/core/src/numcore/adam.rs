use serde::{Deserialize, Serialize};

use super::{NumError, Tensor};

/// Adam moments and hyperparameters for a fixed, ordered parameter list.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(param_lens: &[usize], lr: f64) -> Self {
        Self {
            step: 0,
            m: param_lens.iter().map(|&n| vec![0.0; n]).collect(),
            v: param_lens.iter().map(|&n| vec![0.0; n]).collect(),
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn for_params(params: &[&mut Tensor], lr: f64) -> Self {
        let lens: Vec<usize> = params.iter().map(|p| p.numel()).collect();
        Self::new(&lens, lr)
    }
}

/// One bias-corrected Adam update. Gradients are left in place.
pub fn adam_step(params: &mut [&mut Tensor], state: &mut AdamState) -> Result<(), NumError> {
    if params.len() != state.m.len() {
        return Err(NumError::Shape(format!(
            "optimizer tracks {} parameters, got {}",
            state.m.len(),
            params.len()
        )));
    }
    for (i, p) in params.iter().enumerate() {
        match p.grad() {
            None => return Err(NumError::MissingGrad(i)),
            Some(g) if g.len() != state.m[i].len() => {
                return Err(NumError::Shape(format!("parameter {i} changed size")));
            }
            Some(g) if g.iter().any(|x| !x.is_finite()) => {
                return Err(NumError::NonFinite(format!("gradient of parameter {i}")));
            }
            Some(_) => {}
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    let (b1, b2, lr, eps) = (state.beta1, state.beta2, state.lr, state.eps);
    for (i, p) in params.iter_mut().enumerate() {
        let g = p.grad().expect("checked above").to_vec();
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (j, w) in p.data_mut().iter_mut().enumerate() {
            m[j] = b1 * m[j] + (1.0 - b1) * g[j];
            v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
            let mhat = m[j] / bc1;
            let vhat = v[j] / bc2;
            *w -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Rescales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(params: &mut [&mut Tensor], max_norm: f64) -> f64 {
    let sq: f64 = params.iter().filter_map(|p| p.grad()).flat_map(|g| g.iter()).map(|x| x * x).sum();
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for p in params.iter_mut() {
            if let Some(g) = p.grad() {
                let scaled = g.iter().map(|x| x * s).collect();
                p.set_grad(scaled).expect("same length");
            }
        }
    }
    norm
}
