
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Linear-β diffusion coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    pub betas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub alphas_cumprod: Vec<f64>,
}

pub const BETA_START: f64 = 1e-4;
pub const BETA_END: f64 = 0.02;
pub const TRAIN_STEPS: usize = 1000;

pub fn make_schedule(steps: usize) -> Result<NoiseSchedule> {
    if steps < 2 {
        return Err(Error::Input(format!("schedule needs at least 2 steps, got {steps}")));
    }
    let betas: Vec<f64> = (0..steps)
        .map(|i| BETA_START + (BETA_END - BETA_START) * i as f64 / (steps - 1) as f64)
        .collect();
    let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
    let mut acc = 1.0;
    let alphas_cumprod = alphas
        .iter()
        .map(|a| {
            acc *= a;
            acc
        })
        .collect();
    Ok(NoiseSchedule {
        betas,
        alphas,
        alphas_cumprod,
    })
}

impl NoiseSchedule {
    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.alphas_cumprod
            .get(t)
            .copied()
            .ok_or_else(|| Error::Input(format!("timestep {t} outside 0..{}", self.len())))
    }
}

/// `√ᾱ_t·z0 + √(1−ᾱ_t)·eps`.
pub fn q_sample(z0: &Tensor, t: usize, eps: &Tensor, s: &NoiseSchedule) -> Result<Tensor> {
    q_sample_with(z0, s.alpha_bar(t)?, eps)
}

pub(crate) fn q_sample_with(z0: &Tensor, alpha_bar: f64, eps: &Tensor) -> Result<Tensor> {
    if z0.shape() != eps.shape() {
        return Err(crate::Error::Dimension {
            op: "q_sample",
            lhs: z0.shape().to_vec(),
            rhs: eps.shape().to_vec(),
        });
    }
    z0.scale(alpha_bar.sqrt()).add(&eps.scale((1.0 - alpha_bar).sqrt()))
}
