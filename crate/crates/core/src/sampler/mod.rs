//! DDIM sampling with classifier-free guidance and optional LAG blending.

mod lag;
mod masks_io;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::net::{hex, make_schedule, unet_forward, NoiseSchedule, UNetWeights, TRAIN_STEPS};
use crate::residuals::ResidualSet;
use crate::rng;
use crate::tensor::Tensor;
use crate::text::Vocabulary;

pub use lag::{
    aggregate_concept_maps, binarize_median, blend_features, median, BlockMask, LagConfig, LagStep, MaskRecord,
    MaskRule, MaskSource, MaskStack,
};
pub use masks_io::{load_masks, save_masks, COVERAGE_FILE};

pub const DEFAULT_STEPS: usize = 50;
pub const DEFAULT_GUIDANCE: f64 = 6.0;

/// `ε_u + w·(ε_c − ε_u)`.
pub fn cfg_combine(eps_uncond: &Tensor, eps_cond: &Tensor, w: f64) -> Result<Tensor> {
    if eps_uncond.shape() != eps_cond.shape() {
        return Err(Error::dim("cfg_combine", eps_uncond.shape(), eps_cond.shape()));
    }
    let out = eps_uncond
        .data()
        .iter()
        .zip(eps_cond.data())
        .map(|(&u, &c)| u + w * (c - u))
        .collect();
    Tensor::new(out, eps_uncond.shape())
}

/// DDIM update between two noise levels given as `ᾱ` values.
pub fn ddim_update(z_t: &Tensor, eps: &Tensor, abar_t: f64, abar_prev: f64, eta: f64, noise: &Tensor) -> Result<Tensor> {
    if z_t.shape() != eps.shape() || z_t.shape() != noise.shape() {
        return Err(Error::dim("ddim_step", z_t.shape(), eps.shape()));
    }
    let sigma = if eta == 0.0 {
        0.0
    } else {
        eta * ((1.0 - abar_prev) / (1.0 - abar_t)).sqrt() * (1.0 - abar_t / abar_prev).max(0.0).sqrt()
    };
    let (sa, s1a) = (abar_t.sqrt(), (1.0 - abar_t).sqrt());
    let (sp, dir) = (abar_prev.sqrt(), (1.0 - abar_prev - sigma * sigma).max(0.0).sqrt());
    let out = z_t
        .data()
        .iter()
        .zip(eps.data())
        .zip(noise.data())
        .map(|((&z, &e), &n)| {
            let z0 = (z - s1a * e) / sa;
            let v = sp * z0 + dir * e;
            if sigma == 0.0 {
                v
            } else {
                v + sigma * n
            }
        })
        .collect();
    Tensor::new(out, z_t.shape())
}

/// One DDIM step from `t` to `t_prev`; `None` is the clean endpoint (`ᾱ = 1`).
#[allow(clippy::too_many_arguments)]
pub fn ddim_step(
    z_t: &Tensor,
    eps: &Tensor,
    t: usize,
    t_prev: Option<usize>,
    s: &NoiseSchedule,
    eta: f64,
    noise: &Tensor,
) -> Result<Tensor> {
    let abar_prev = match t_prev {
        Some(p) if p >= t => return Err(Error::Input(format!("t_prev {p} must be below t {t}"))),
        Some(p) => s.alpha_bar(p)?,
        None => 1.0,
    };
    ddim_update(z_t, eps, s.alpha_bar(t)?, abar_prev, eta, noise)
}

/// Evenly spaced descending timesteps `[(N−1)·k, …, k, 0]` with `k = T / N`.
pub fn ddim_timesteps(steps: usize) -> Result<Vec<usize>> {
    if steps == 0 || steps > TRAIN_STEPS {
        return Err(Error::Input(format!("steps must be in 1..={TRAIN_STEPS}, got {steps}")));
    }
    let k = TRAIN_STEPS / steps;
    Ok((0..steps).rev().map(|i| i * k + (TRAIN_STEPS - 1 - (steps - 1) * k)).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SampleRequest {
    pub prompt: String,
    pub seed: u64,
    pub steps: usize,
    pub eta: f64,
    pub guidance: f64,
    pub lag: bool,
    pub mask_rule: MaskRule,
    /// Seed of the per-step noise stream; defaults to `seed`.
    pub noise_seed: Option<u64>,
}

impl Default for SampleRequest {
    fn default() -> Self {
        Self {
            prompt: String::new(),
            seed: 0,
            steps: DEFAULT_STEPS,
            eta: 0.0,
            guidance: DEFAULT_GUIDANCE,
            lag: false,
            mask_rule: MaskRule::default(),
            noise_seed: None,
        }
    }
}

impl SampleRequest {
    pub fn validate(&self) -> Result<()> {
        ddim_timesteps(self.steps)?;
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(Error::Input(format!("eta must be in [0, 1], got {}", self.eta)));
        }
        if !self.guidance.is_finite() || self.guidance < 0.0 {
            return Err(Error::Input(format!("guidance must be ≥ 0, got {}", self.guidance)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SampleOutput {
    /// `[c×s×s]` in `[-1, 1]`.
    pub image: Tensor,
    pub masks: Option<MaskStack>,
    pub evaluations: usize,
    /// Digest of the initial latent, for seed-protocol checks.
    pub zt_hash: String,
}

pub fn tensor_hash(t: &Tensor) -> String {
    let mut h = Sha256::new();
    for v in t.data() {
        h.update(v.to_le_bytes());
    }
    hex(&h.finalize())[..16].to_string()
}

/// Vocabulary with the residual set's identifier active (and its trained
/// embedding, if any).
pub fn vocab_for(vocab: &Vocabulary, residuals: Option<&ResidualSet>) -> Result<Vocabulary> {
    let mut v = vocab.clone();
    if let Some(rs) = residuals {
        v.activate_concept(rs.meta.concept_token)?;
        if let Some(e) = &rs.token_embedding {
            v.set_embedding_row(rs.meta.concept_token, e.data())?;
        }
    }
    Ok(v)
}

/// Generates one image. The unconditional pass always runs base weights;
/// with `lag`, masks from the conditional pass gate the personalized
/// proj_out features block by block. `injected` replaces computed masks.
pub fn sample(
    req: &SampleRequest,
    w: &UNetWeights,
    vocab: &Vocabulary,
    residuals: Option<&ResidualSet>,
    injected: Option<std::sync::Arc<MaskStack>>,
) -> Result<SampleOutput> {
    req.validate()?;
    let vocab = vocab_for(vocab, residuals)?;
    let cond = vocab.condition(&req.prompt)?;
    let null = vocab.null_condition()?;
    let lag_cfg = if req.lag {
        if residuals.is_none() {
            return Err(Error::Config("LAG requires a residual file".into()));
        }
        let cfg = LagConfig {
            concept_indices: cond.concept_indices.clone(),
            rule: req.mask_rule,
            injected,
        };
        if cfg.concept_indices.is_empty() {
            return Err(Error::Config("prompt contains no concept tokens".into()));
        }
        Some(cfg)
    } else {
        None
    };

    let arch = &w.config;
    let shape = [arch.channels, arch.image_size, arch.image_size];
    let n = shape.iter().product();
    let schedule = make_schedule(TRAIN_STEPS)?;
    let mut z = Tensor::new(rng::normal_vec(&mut rng::stream(req.seed, "sample-latent", 0), n, 1.0), &shape)?;
    let zt_hash = tensor_hash(&z);
    let mut noise_rng = rng::stream(req.noise_seed.unwrap_or(req.seed), "sample-noise", 0);
    let timesteps = ddim_timesteps(req.steps)?;
    let mut evaluations = 0;
    let mut stack = MaskStack::default();

    for (k, &t) in timesteps.iter().enumerate() {
        let lag = lag_cfg.as_ref().map(|config| LagStep {
            config,
            step: k,
            timestep: t,
        });
        let c = unet_forward(&z, t, &cond, w, residuals, lag)?;
        let u = unet_forward(&z, t, &null, w, None, None)?;
        evaluations += 2;
        stack.records.extend(c.masks);
        let eps = cfg_combine(&u.eps, &c.eps, req.guidance)?;
        let noise = if req.eta > 0.0 {
            Tensor::new(rng::normal_vec(&mut noise_rng, n, 1.0), &shape)?
        } else {
            Tensor::zeros(&shape)
        };
        z = ddim_step(&z, &eps, t, timesteps.get(k + 1).copied(), &schedule, req.eta, &noise)?;
    }
    if !z.is_finite() {
        return Err(Error::Contract("sampling produced non-finite values".into()));
    }
    Ok(SampleOutput {
        image: z.map(|v| v.clamp(-1.0, 1.0)),
        masks: lag_cfg.map(|_| stack),
        evaluations,
        zt_hash,
    })
}
