use std::sync::Arc;

use log::info;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::{make_schedule, q_sample_with, unet_forward, UNetWeights, TRAIN_STEPS};
use crate::residuals::{init_residuals, PersonalizeConfig, ResidualSet, TargetLayer, REG_IMAGES_PER_BATCH};
use crate::rng::{self, Stream};
use crate::tensor::{adam_step, backward, AdamState, Tensor};
use crate::text::{
    embed_with_table, render_template, render_template_without_class, table_with_row, tokenize, Conditioning,
    TokenSequence, Vocabulary,
};

pub const MAX_REFERENCES: usize = 10;
/// Fixed (t, ε) draws per reference image used to score reference loss.
pub const PROBES_PER_REFERENCE: usize = 8;

/// How many reference and regularization images one batch consumed.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchComposition {
    pub reference: usize,
    pub regularization: usize,
}

#[derive(Debug, Clone)]
pub struct PersonalizeOutput {
    pub residuals: ResidualSet,
    /// Base vocabulary with the concept id registered and active.
    pub vocab: Vocabulary,
    pub prompt: String,
    pub losses: Vec<f64>,
    pub composition: Vec<BatchComposition>,
    pub initial_eval_loss: f64,
    pub final_eval_loss: f64,
}

/// Parameter change of one group after training.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupChange {
    pub name: String,
    pub max_abs_change: f64,
}

fn hflip(img: &Tensor) -> Result<Tensor> {
    let (c, h, w) = match img.shape() {
        [c, h, w] => (*c, *h, *w),
        s => return Err(Error::dim("hflip", s, &[3])),
    };
    let idx: Vec<usize> = (0..c * h * w)
        .map(|i| {
            let x = i % w;
            i - x + (w - 1 - x)
        })
        .collect();
    img.gather(Arc::new(idx), &[c, h, w])
}

fn conditioning(tokens: &TokenSequence, table: &Tensor) -> Result<Conditioning> {
    Ok(Conditioning {
        emb: embed_with_table(tokens, table)?,
        valid: Arc::new(tokens.valid_mask()),
        concept_indices: tokens.concept_indices.clone(),
    })
}

fn check_images(images: &[Tensor], base: &UNetWeights, what: &str) -> Result<()> {
    let a = &base.config;
    let shape = [a.channels, a.image_size, a.image_size];
    match images.iter().find(|r| r.shape() != shape) {
        Some(r) => Err(Error::Input(format!("{what} image of shape {:?}, model expects {shape:?}", r.shape()))),
        None => Ok(()),
    }
}

fn noisy_item(
    r: &mut Stream,
    image: &Tensor,
    abar: &dyn Fn(usize) -> Result<f64>,
) -> Result<(Tensor, usize, Tensor)> {
    let img = if rng::bernoulli(r, 0.5) { hflip(image)? } else { image.clone() };
    let t = rng::uniform_index(r, TRAIN_STEPS);
    let eps = Tensor::new(rng::normal_vec(r, img.numel(), 1.0), img.shape())?;
    Ok((q_sample_with(&img, abar(t)?, &eps)?, t, eps))
}

/// Prepares the vocabulary (concept id registered and active) and the
/// training prompt for a concept.
pub fn concept_prompt(vocab: &Vocabulary, macro_class: &str, cfg: &PersonalizeConfig) -> Result<(Vocabulary, String)> {
    let mut v = vocab.clone();
    // Validate the class even when it is left out of the prompt.
    render_template(macro_class, &v)?;
    v.register_concept_token()?;
    let prompt = if cfg.use_macro_class {
        render_template(macro_class, &v)?
    } else {
        render_template_without_class()
    };
    Ok((v, prompt))
}

/// Mean noise-prediction loss over a fixed, seeded set of (t, ε) draws per
/// reference. With the same seed, base and personalized models see
/// identical noise.
pub fn eval_reference_loss(
    base: &UNetWeights,
    vocab: &Vocabulary,
    residuals: Option<&ResidualSet>,
    refs: &[Tensor],
    prompt: &str,
    seed: u64,
) -> Result<f64> {
    if refs.is_empty() {
        return Err(Error::Input("no reference images".into()));
    }
    let schedule = make_schedule(TRAIN_STEPS)?;
    let mut cond = vocab.condition(prompt)?;
    if let Some(e) = residuals.and_then(|r| r.token_embedding.as_ref()) {
        let id = vocab.active_concept().ok_or_else(|| Error::Vocabulary("no active concept".into()))?;
        let tokens = tokenize(prompt, vocab)?;
        cond = conditioning(&tokens, &table_with_row(vocab.embeddings(), id, e)?)?;
    }
    let mut total = 0.0;
    for (i, img) in refs.iter().enumerate() {
        let mut r = rng::stream(seed, "reference-probe", i as u64);
        for _ in 0..PROBES_PER_REFERENCE {
            let t = rng::uniform_index(&mut r, TRAIN_STEPS);
            let eps = Tensor::new(rng::normal_vec(&mut r, img.numel(), 1.0), img.shape())?;
            let z = q_sample_with(img, schedule.alpha_bar(t)?, &eps)?;
            total += unet_forward(&z, t, &cond, base, residuals, None)?.eps.mse(&eps)?.item()?;
        }
    }
    Ok(total / (refs.len() * PROBES_PER_REFERENCE) as f64)
}

/// Learns low-rank residuals (and optionally the identifier embedding) for
/// one concept from its reference images. Base weights are never modified.
pub fn personalize(
    base: &UNetWeights,
    vocab: &Vocabulary,
    refs: &[Tensor],
    macro_class: &str,
    reg_images: &[Tensor],
    cfg: &PersonalizeConfig,
    seed: u64,
) -> Result<PersonalizeOutput> {
    if refs.is_empty() || refs.len() > MAX_REFERENCES {
        return Err(Error::Input(format!(
            "need 1 to {MAX_REFERENCES} reference images, got {}",
            refs.len()
        )));
    }
    cfg.validate()?;
    check_images(refs, base, "reference")?;
    if cfg.use_reg_images {
        if reg_images.is_empty() {
            return Err(Error::Input("regularization enabled but no regularization images given".into()));
        }
        check_images(reg_images, base, "regularization")?;
    }
    let (mut vocab, prompt) = concept_prompt(vocab, macro_class, cfg)?;
    let concept_id = vocab.active_concept().expect("just registered");
    let ref_tokens = tokenize(&prompt, &vocab)?;
    let reg_tokens = tokenize(&format!("a photo of a {macro_class}"), &vocab)?;

    let mut rs = init_residuals(base, cfg, seed)?;
    rs.meta.concept_token = concept_id;
    rs.meta.macro_class = cfg.use_macro_class.then(|| macro_class.to_string());
    let initial_eval_loss = eval_reference_loss(base, &vocab, Some(&rs), refs, &prompt, seed)?;

    for f in rs.factors_mut() {
        *f = f.param();
    }
    let mut token_row = cfg
        .update_token_embedding
        .then(|| Tensor::new(vocab.embedding_row(concept_id)?, &[vocab.d_txt()]).map(|t| t.param()))
        .transpose()?;
    let mut adam = {
        let mut params: Vec<&Tensor> = rs
            .blocks
            .iter()
            .flat_map(|b| b.entries())
            .flat_map(|(_, f)| [&f.a, &f.b])
            .collect();
        params.extend(token_row.as_ref());
        AdamState::new(&params)
    };

    let schedule = make_schedule(TRAIN_STEPS)?;
    let abar = |t: usize| schedule.alpha_bar(t);
    let n_reg = if cfg.use_reg_images { REG_IMAGES_PER_BATCH } else { 0 };
    let n_ref = cfg.batch_size - n_reg;
    let mut losses = Vec::with_capacity(cfg.iterations);
    let mut composition = Vec::with_capacity(cfg.iterations);

    for it in 0..cfg.iterations {
        let mut r = rng::stream(seed, "personalize-batch", it as u64);
        let table = match &token_row {
            Some(row) => table_with_row(vocab.embeddings(), concept_id, row)?,
            None => vocab.embeddings().clone(),
        };
        let ref_cond = conditioning(&ref_tokens, &table)?;
        let reg_cond = conditioning(&reg_tokens, &table)?;
        let mut total: Option<Tensor> = None;
        for k in 0..cfg.batch_size {
            let (image, cond) = if k < n_ref {
                (&refs[rng::uniform_index(&mut r, refs.len())], &ref_cond)
            } else {
                (&reg_images[rng::uniform_index(&mut r, reg_images.len())], &reg_cond)
            };
            let (z, t, eps) = noisy_item(&mut r, image, &abar)?;
            let loss = unet_forward(&z, t, cond, base, Some(&rs), None)?.eps.mse(&eps)?;
            total = Some(match total {
                Some(acc) => acc.add(&loss)?,
                None => loss,
            });
        }
        composition.push(BatchComposition {
            reference: n_ref,
            regularization: n_reg,
        });
        let loss = total.expect("batch is non-empty").scale(1.0 / cfg.batch_size as f64);
        let value = loss.item()?;
        if !value.is_finite() {
            return Err(Error::Contract(format!("non-finite personalization loss at iteration {it}")));
        }
        losses.push(value);
        let grads = backward(&loss)?;
        let mut params: Vec<&mut Tensor> = rs.factors_mut();
        if let Some(row) = token_row.as_mut() {
            params.push(row);
        }
        let g: Vec<Vec<f64>> = params.iter().map(|p| grads.get_or_zeros(p)).collect();
        adam_step(&mut params, &g, &mut adam, cfg.learning_rate)?;
        if it % 25 == 0 || it + 1 == cfg.iterations {
            info!("event=personalize_step iteration={it} loss={value:.5}");
        }
    }

    for f in rs.factors_mut() {
        *f = f.detach();
    }
    if let Some(row) = token_row {
        let row = row.detach();
        vocab.set_embedding_row(concept_id, row.data())?;
        rs.token_embedding = Some(row);
    }
    rs.meta.param_count = rs.param_count();
    let final_eval_loss = eval_reference_loss(base, &vocab, Some(&rs), refs, &prompt, seed)?;
    Ok(PersonalizeOutput {
        residuals: rs,
        vocab,
        prompt,
        losses,
        composition,
        initial_eval_loss,
        final_eval_loss,
    })
}

/// Names of every parameter group that exists in the model plus every
/// candidate residual slot, paired with how much it moved after running
/// `cfg` (usually one iteration). Groups outside the selector report 0.
pub fn update_probe(
    base: &UNetWeights,
    vocab: &Vocabulary,
    refs: &[Tensor],
    macro_class: &str,
    cfg: &PersonalizeConfig,
    seed: u64,
) -> Result<Vec<GroupChange>> {
    let before_hash = base.content_hash();
    let init = init_residuals(base, cfg, seed)?;
    let out = personalize(base, vocab, refs, macro_class, &[], cfg, seed)?;
    let mut changes = Vec::new();
    let base_changed = if base.content_hash() == before_hash { 0.0 } else { f64::INFINITY };
    for (name, _) in base.named() {
        changes.push(GroupChange {
            name: format!("base.{name}"),
            max_abs_change: base_changed,
        });
    }
    let all = [TargetLayer::ProjOut, TargetLayer::ProjIn, TargetLayer::Key, TargetLayer::Value];
    for (i, (before, after)) in init.blocks.iter().zip(&out.residuals.blocks).enumerate() {
        for layer in all {
            let (da, db) = match (before.get(layer), after.get(layer)) {
                (Some(b), Some(a)) => (a.a.max_abs_diff(&b.a)?, a.b.max_abs_diff(&b.b)?),
                (None, None) => (0.0, 0.0),
                _ => return Err(Error::Contract(format!("residual slot {layer:?} appeared or vanished"))),
            };
            let tag = layer.name();
            changes.push(GroupChange {
                name: format!("residual.{i}.{tag}.A"),
                max_abs_change: da,
            });
            changes.push(GroupChange {
                name: format!("residual.{i}.{tag}.B"),
                max_abs_change: db,
            });
        }
    }
    let mut row_change = 0.0;
    for id in 0..vocab.len() as u32 {
        let a = vocab.embedding_row(id)?;
        let b = out.vocab.embedding_row(id)?;
        for (x, y) in a.iter().zip(&b) {
            row_change = f64::max(row_change, (x - y).abs());
        }
    }
    changes.push(GroupChange {
        name: "token_embedding".into(),
        max_abs_change: row_change,
    });
    Ok(changes)
}

/// Group names [`update_probe`] is expected to report as changed.
pub fn trainable_groups(cfg: &PersonalizeConfig, num_blocks: usize) -> Vec<String> {
    let mut out = Vec::new();
    for i in 0..num_blocks {
        for layer in cfg.target.layers() {
            out.push(format!("residual.{i}.{}.A", layer.name()));
            out.push(format!("residual.{i}.{}.B", layer.name()));
        }
    }
    if cfg.update_token_embedding {
        out.push("token_embedding".into());
    }
    out
}
