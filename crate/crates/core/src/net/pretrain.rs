use log::info;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::{make_schedule, q_sample_with, unet_forward, UNetWeights, TRAIN_STEPS};
use crate::rng;
use crate::tensor::{adam_step, backward, AdamState, Tensor};
use crate::text::{embed_with_table, tokenize, TokenSequence, Vocabulary};

pub const MIN_DATASET_SIZE: usize = 64;

/// One image/caption pair; images are `[c×s×s]` in `[-1, 1]`.
#[derive(Debug, Clone)]
pub struct TrainExample {
    pub image: Tensor,
    pub caption: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Probability of replacing a caption by the empty prompt.
    pub prompt_dropout: f64,
    pub train_text_embeddings: bool,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 4000,
            batch_size: 8,
            learning_rate: 2e-3,
            prompt_dropout: 0.1,
            train_text_embeddings: true,
            seed: 0,
        }
    }
}

impl PretrainConfig {
    /// Cosine decay from `learning_rate` to a tenth of it over `steps`.
    pub fn lr_at(&self, step: usize) -> f64 {
        let progress = step as f64 / self.steps.max(1) as f64;
        let cosine = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
        self.learning_rate * (0.1 + 0.9 * cosine)
    }
}

#[derive(Debug, Clone)]
pub struct PretrainOutput {
    pub weights: UNetWeights,
    pub vocab: Vocabulary,
    /// Mean batch loss per optimizer step.
    pub losses: Vec<f64>,
    /// Examples whose caption was dropped to the empty prompt.
    pub null_prompts: usize,
    pub examples_seen: usize,
}

/// Trains the base denoiser (and optionally the token table) on captioned
/// images with the noise-prediction objective.
pub fn pretrain(
    init: &UNetWeights,
    vocab: &Vocabulary,
    data: &[TrainExample],
    cfg: &PretrainConfig,
) -> Result<PretrainOutput> {
    if data.len() < MIN_DATASET_SIZE {
        return Err(Error::Input(format!(
            "pretraining needs at least {MIN_DATASET_SIZE} images, got {}",
            data.len()
        )));
    }
    if cfg.batch_size == 0 || !(0.0..=1.0).contains(&cfg.prompt_dropout) {
        return Err(Error::Config("batch size must be positive and dropout in [0, 1]".into()));
    }
    let arch = &init.config;
    let shape = [arch.channels, arch.image_size, arch.image_size];
    let tokens: Vec<TokenSequence> = data
        .iter()
        .map(|ex| {
            if ex.image.shape() != shape {
                return Err(Error::Input(format!(
                    "training image of shape {:?}, model expects {shape:?}",
                    ex.image.shape()
                )));
            }
            tokenize(&ex.caption, vocab)
        })
        .collect::<Result<_>>()?;
    let null_tokens = tokenize("", vocab)?;
    let schedule = make_schedule(TRAIN_STEPS)?;

    let mut w = init.as_params();
    let mut table = vocab.embeddings().param();
    let mut adam = {
        let mut ps: Vec<&Tensor> = w.named().into_iter().map(|(_, t)| t).collect();
        if cfg.train_text_embeddings {
            ps.push(&table);
        }
        AdamState::new(&ps)
    };
    let mut losses = Vec::with_capacity(cfg.steps);
    let mut null_prompts = 0;
    let n_elems = shape.iter().product::<usize>();

    for step in 0..cfg.steps {
        let mut r = rng::stream(cfg.seed, "pretrain-batch", step as u64);
        let mut total: Option<Tensor> = None;
        for _ in 0..cfg.batch_size {
            let i = rng::uniform_index(&mut r, data.len());
            let t = rng::uniform_index(&mut r, TRAIN_STEPS);
            let eps = Tensor::new(rng::normal_vec(&mut r, n_elems, 1.0), &shape)?;
            let seq = if rng::bernoulli(&mut r, cfg.prompt_dropout) {
                null_prompts += 1;
                &null_tokens
            } else {
                &tokens[i]
            };
            let cond = crate::text::Conditioning {
                emb: embed_with_table(seq, &table)?,
                valid: std::sync::Arc::new(seq.valid_mask()),
                concept_indices: Vec::new(),
            };
            let z_t = q_sample_with(&data[i].image, schedule.alpha_bar(t)?, &eps)?;
            let loss = unet_forward(&z_t, t, &cond, &w, None, None)?.eps.mse(&eps)?;
            total = Some(match total {
                Some(acc) => acc.add(&loss)?,
                None => loss,
            });
        }
        let loss = total.expect("batch is non-empty").scale(1.0 / cfg.batch_size as f64);
        let value = loss.item()?;
        if !value.is_finite() {
            return Err(Error::Contract(format!("non-finite loss at step {step}")));
        }
        losses.push(value);
        let grads = backward(&loss)?;
        {
            let mut params: Vec<&mut Tensor> = w.named_mut().into_iter().map(|(_, t)| t).collect();
            if cfg.train_text_embeddings {
                params.push(&mut table);
            }
            let g: Vec<Vec<f64>> = params.iter().map(|p| grads.get_or_zeros(p)).collect();
            adam_step(&mut params, &g, &mut adam, cfg.lr_at(step))?;
        }
        if step % 50 == 0 || step + 1 == cfg.steps {
            info!("event=pretrain_step step={step} loss={value:.5}");
        }
    }

    let mut out_vocab = vocab.clone();
    out_vocab.set_embeddings(table.detach())?;
    Ok(PretrainOutput {
        weights: w.detached(),
        vocab: out_vocab,
        losses,
        null_prompts,
        examples_seen: cfg.steps * cfg.batch_size,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn learning_rate_decays_to_a_tenth() {
        let cfg = PretrainConfig {
            steps: 100,
            ..PretrainConfig::default()
        };
        assert_eq!(cfg.lr_at(0), cfg.learning_rate);
        assert!((cfg.lr_at(50) - 0.55 * cfg.learning_rate).abs() < 1e-15);
        assert!((cfg.lr_at(100) - 0.1 * cfg.learning_rate).abs() < 1e-15);
        assert!(cfg.lr_at(70) < cfg.lr_at(30));
    }
}
