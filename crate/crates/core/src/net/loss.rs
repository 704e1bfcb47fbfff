use crate::error::Result;
use crate::net::{q_sample_with, unet_forward, NoiseSchedule, UNetWeights};
use crate::residuals::ResidualSet;
use crate::tensor::Tensor;
use crate::text::Conditioning;

/// `‖ε − ε_θ(z_t, t, c)‖²` averaged over elements, with `z_t` drawn from
/// `q(z_t | z_0)` using the supplied noise.
pub fn ldm_loss(
    z0: &Tensor,
    t: usize,
    eps: &Tensor,
    cond: &Conditioning,
    w: &UNetWeights,
    residuals: Option<&ResidualSet>,
    schedule: &NoiseSchedule,
) -> Result<Tensor> {
    ldm_loss_at(z0, t, schedule.alpha_bar(t)?, eps, cond, w, residuals)
}

/// [`ldm_loss`] with an explicit `ᾱ_t`.
pub fn ldm_loss_at(
    z0: &Tensor,
    t: usize,
    alpha_bar: f64,
    eps: &Tensor,
    cond: &Conditioning,
    w: &UNetWeights,
    residuals: Option<&ResidualSet>,
) -> Result<Tensor> {
    let z_t = q_sample_with(z0, alpha_bar, eps)?;
    unet_forward(&z_t, t, cond, w, residuals, None)?.eps.mse(eps)
}
