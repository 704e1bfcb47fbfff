use std::sync::{Arc, OnceLock};

use lagdiff::data::{gen_class_images, gen_concept, toy_vocabulary, ConceptSpec, CLASSES};
use lagdiff::eval::{macro_class_nn, Probe};
use lagdiff::net::{load_model, save_model, unet_forward, ArchConfig, UNetWeights};
use lagdiff::residuals::{
    personalize, trainable_groups, update_probe, PersonalizeConfig, PersonalizeOutput, TargetSelector,
};
use lagdiff::sampler::{load_masks, sample, save_masks, vocab_for, MaskStack, SampleRequest};
use lagdiff::text::Vocabulary;
use lagdiff::{rng, Error, Tensor};

const STEPS: usize = 6;

struct Fixture {
    base: UNetWeights,
    vocab: Vocabulary,
    refs: Vec<Tensor>,
    trained: PersonalizeOutput,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let arch = ArchConfig::default();
        let base = UNetWeights::init(&arch, 11).unwrap();
        let vocab = toy_vocabulary(arch.d_txt, 11).unwrap();
        let spec = &ConceptSpec::presets()[0];
        let refs: Vec<Tensor> = gen_concept(spec, 0).unwrap().into_iter().map(|c| c.image).collect();
        let cfg = PersonalizeConfig {
            iterations: 2,
            ..PersonalizeConfig::default()
        };
        let trained = personalize(&base, &vocab, &refs, &spec.macro_class, &[], &cfg, 0).unwrap();
        Fixture {
            base,
            vocab,
            refs,
            trained,
        }
    })
}

fn request(prompt: &str, lag: bool) -> SampleRequest {
    SampleRequest {
        prompt: prompt.into(),
        seed: 4,
        steps: STEPS,
        lag,
        ..SampleRequest::default()
    }
}

fn sides(w: &UNetWeights) -> Vec<usize> {
    (0..w.config.num_blocks()).map(|i| w.config.block_side(i)).collect()
}

#[test]
fn zeroed_residuals_reproduce_the_base_forward_and_sampler() {
    let f = fixture();
    let zero = f.trained.residuals.zeroed();
    let vocab = vocab_for(&f.trained.vocab, Some(&zero)).unwrap();
    let cond = vocab.condition(&f.trained.prompt).unwrap();
    let z = Tensor::randn(&[3, 32, 32], 1.0, &mut rng::stream(1, "zero-test", 0));
    let base = unet_forward(&z, 500, &cond, &f.base, None, None).unwrap();
    let with = unet_forward(&z, 500, &cond, &f.base, Some(&zero), None).unwrap();
    assert!(base.eps.max_abs_diff(&with.eps).unwrap() <= 1e-12);

    let req = request(&f.trained.prompt, false);
    let a = sample(&req, &f.base, &f.trained.vocab, None, None).unwrap();
    let b = sample(&req, &f.base, &f.trained.vocab, Some(&zero), None).unwrap();
    assert!(a.image.max_abs_diff(&b.image).unwrap() <= 1e-12);
    let lag = sample(&request(&f.trained.prompt, true), &f.base, &f.trained.vocab, Some(&zero), None).unwrap();
    assert!(lag.image.bit_eq(&b.image));
}

#[test]
fn constant_masks_hit_the_two_limits_bitwise() {
    let f = fixture();
    let rs = &f.trained.residuals;
    let personalized = sample(&request(&f.trained.prompt, false), &f.base, &f.trained.vocab, Some(rs), None).unwrap();
    let base = sample(&request(&f.trained.prompt, false), &f.base, &f.trained.vocab, None, None).unwrap();
    assert!(!personalized.image.bit_eq(&base.image));

    let ones = Arc::new(MaskStack::constant(STEPS, &sides(&f.base), 1));
    let zeros = Arc::new(MaskStack::constant(STEPS, &sides(&f.base), 0));
    let lag = request(&f.trained.prompt, true);
    let all = sample(&lag, &f.base, &f.trained.vocab, Some(rs), Some(ones)).unwrap();
    let none = sample(&lag, &f.base, &f.trained.vocab, Some(rs), Some(zeros)).unwrap();
    assert!(all.image.bit_eq(&personalized.image));
    assert!(none.image.bit_eq(&base.image));
}

#[test]
fn lag_costs_no_extra_evaluations_and_records_every_mask() {
    let f = fixture();
    let rs = &f.trained.residuals;
    let plain = sample(&request(&f.trained.prompt, false), &f.base, &f.trained.vocab, Some(rs), None).unwrap();
    let lag = sample(&request(&f.trained.prompt, true), &f.base, &f.trained.vocab, Some(rs), None).unwrap();
    assert_eq!(plain.evaluations, 2 * STEPS);
    assert_eq!(lag.evaluations, 2 * STEPS);
    let masks = lag.masks.unwrap();
    assert_eq!(masks.len(), STEPS * f.base.config.num_blocks());
    for r in &masks.records {
        let n = r.mask.bits.len();
        if !r.mask.degenerate {
            let ones = r.mask.ones_count();
            assert!(ones <= n / 2 && ones > 0, "block {} step {}: {ones}/{n}", r.block, r.step);
        }
    }
}

#[test]
fn dumped_masks_replay_to_the_same_image() {
    let f = fixture();
    let rs = &f.trained.residuals;
    let req = request(&f.trained.prompt, true);
    let first = sample(&req, &f.base, &f.trained.vocab, Some(rs), None).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_masks(first.masks.as_ref().unwrap(), dir.path()).unwrap();
    let loaded = load_masks(dir.path()).unwrap();
    assert_eq!(loaded.len(), STEPS * 4);
    let replay = sample(&req, &f.base, &f.trained.vocab, Some(rs), Some(Arc::new(loaded))).unwrap();
    assert!(replay.image.bit_eq(&first.image));
}

#[test]
fn sampling_is_deterministic_and_seed_sensitive() {
    let f = fixture();
    let req = request("a photo of a cat in the snow", false);
    let a = sample(&req, &f.base, &f.vocab, None, None).unwrap();
    let b = sample(&req, &f.base, &f.vocab, None, None).unwrap();
    assert!(a.image.bit_eq(&b.image));
    assert_eq!(a.zt_hash, b.zt_hash);
    let c = sample(&SampleRequest { seed: 5, ..req }, &f.base, &f.vocab, None, None).unwrap();
    assert_ne!(a.zt_hash, c.zt_hash);
}

#[test]
fn lag_needs_residuals_and_concept_tokens() {
    let f = fixture();
    let err = sample(&request(&f.trained.prompt, true), &f.base, &f.trained.vocab, None, None).unwrap_err();
    assert!(matches!(err, Error::Config(_)));
    let err = sample(
        &request("a photo of the house", true),
        &f.base,
        &f.trained.vocab,
        Some(&f.trained.residuals),
        None,
    )
    .unwrap_err();
    assert!(err.to_string().contains("no concept tokens"), "{err}");
}

#[test]
fn personalization_leaves_the_base_untouched() {
    let f = fixture();
    let before = f.base.content_hash();
    let cfg = PersonalizeConfig {
        iterations: 1,
        ..PersonalizeConfig::default()
    };
    personalize(&f.base, &f.vocab, &f.refs, "dog", &[], &cfg, 3).unwrap();
    assert_eq!(f.base.content_hash(), before);
    assert_eq!(f.trained.residuals.param_count(), 1024);
}

#[test]
fn one_step_moves_only_the_selected_groups() {
    let f = fixture();
    let selectors = [
        TargetSelector::ProjOut,
        TargetSelector::Kv,
        TargetSelector::ProjIn,
        TargetSelector::KvProjOut,
        TargetSelector::KvProjInProjOut,
    ];
    for target in selectors {
        for update_token_embedding in [false, true] {
            let cfg = PersonalizeConfig {
                iterations: 1,
                batch_size: 2,
                target,
                update_token_embedding,
                ..PersonalizeConfig::default()
            };
            let expected = trainable_groups(&cfg, 4);
            let changes = update_probe(&f.base, &f.vocab, &f.refs[..2], "dog", &cfg, 0).unwrap();
            for c in changes {
                let selected = expected.contains(&c.name);
                assert_eq!(
                    c.max_abs_change > 0.0,
                    selected,
                    "{target:?} token={update_token_embedding}: group {} changed by {}",
                    c.name,
                    c.max_abs_change
                );
            }
        }
    }
}

#[test]
fn checkpoints_round_trip_with_hash_check() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let manifest = save_model(dir.path(), &f.base, &f.vocab, serde_json::json!({"note": "test"})).unwrap();
    assert_eq!(manifest.weights_hash, f.base.content_hash());
    let (w, v, m) = load_model(dir.path()).unwrap();
    assert_eq!(w.content_hash(), f.base.content_hash());
    assert_eq!(v.words(), f.vocab.words());
    assert_eq!(m.weights_hash, manifest.weights_hash);

    let weights = dir.path().join(&manifest.weights);
    let mut bytes = std::fs::read(&weights).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 0x40;
    std::fs::write(&weights, bytes).unwrap();
    assert!(load_model(dir.path()).is_err());
}

#[test]
fn macro_class_selection_recovers_the_generating_class() {
    let f = fixture();
    let probe = Probe::new(&f.base, &f.vocab).unwrap();
    let mut misses = Vec::new();
    for seed in 0..4 {
        for (class, _) in CLASSES {
            let refs = gen_class_images(class, 4, 100 + seed).unwrap();
            let picked = macro_class_nn(&refs, &f.vocab, &probe).unwrap();
            if picked != class {
                misses.push(format!("seed {seed}: {class} -> {picked}"));
            }
        }
        for spec in ConceptSpec::presets() {
            let refs: Vec<Tensor> = gen_concept(&spec, seed).unwrap().into_iter().map(|c| c.image).collect();
            let picked = macro_class_nn(&refs, &f.vocab, &probe).unwrap();
            if picked != spec.macro_class {
                misses.push(format!("seed {seed}: {} -> {picked}", spec.id));
            }
        }
    }
    assert!(misses.is_empty(), "{misses:?}");
}
