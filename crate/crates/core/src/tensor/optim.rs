use super::Tensor;
use crate::error::{Error, Result};

/// Adam moments for an ordered list of parameters.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &[&Tensor]) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }
}

/// One bias-corrected Adam update. `grads[i]` pairs with `params[i]`.
pub fn adam_step(params: &mut [&mut Tensor], grads: &[Vec<f64>], state: &mut AdamState, lr: f64) -> Result<()> {
    if lr.is_nan() || lr <= 0.0 {
        return Err(Error::Input(format!("learning rate must be positive, got {lr}")));
    }
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::dim(
            "adam_step",
            &[params.len(), state.m.len()],
            &[grads.len()],
        ));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.numel() != g.len() || state.m[i].len() != g.len() {
            return Err(Error::dim("adam_step", p.shape(), &[g.len()]));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    for (i, p) in params.iter_mut().enumerate() {
        let g = &grads[i];
        let m = &mut state.m[i];
        let v = &mut state.v[i];
        let mut data = p.to_vec();
        for j in 0..data.len() {
            m[j] = state.beta1 * m[j] + (1.0 - state.beta1) * g[j];
            v[j] = state.beta2 * v[j] + (1.0 - state.beta2) * g[j] * g[j];
            let mhat = m[j] / bc1;
            let vhat = v[j] / bc2;
            data[j] -= lr * mhat / (vhat.sqrt() + state.eps);
        }
        p.set_data(data)?;
    }
    Ok(())
}
