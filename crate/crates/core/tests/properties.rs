use std::collections::HashSet;

use nalgebra::DMatrix;
use proptest::prelude::*;

use lagdiff::data::{decode_ppm, encode_ppm, from_u8, gen_class_images, to_u8};
use lagdiff::eval::{cosine, toy_image_alignment};
use lagdiff::net::{
    depth_to_space, make_schedule, q_sample, space_to_depth, ArchConfig, UNetWeights, TRAIN_STEPS,
};
use lagdiff::residuals::{
    apply_residual, init_residuals, load_residuals, rank_for, save_residuals, PersonalizeConfig, RankRule,
    TargetSelector,
};
use lagdiff::sampler::{binarize_median, blend_features, cfg_combine, ddim_step, median};
use lagdiff::Tensor;

fn tensor(data: Vec<f64>, shape: &[usize]) -> Tensor {
    Tensor::new(data, shape).unwrap()
}

fn distinct(values: &[f64]) -> bool {
    let set: HashSet<u64> = values.iter().map(|v| v.to_bits()).collect();
    set.len() == values.len()
}

fn numerical_rank(m: &Tensor) -> usize {
    let (r, c) = (m.shape()[0], m.shape()[1]);
    let sv = DMatrix::from_row_slice(r, c, m.data()).singular_values();
    let max = sv.iter().cloned().fold(0.0, f64::max);
    sv.iter().filter(|&&s| s > 1e-9 * max).count()
}

fn map_strategy() -> impl Strategy<Value = (usize, Vec<f64>)> {
    prop_oneof![Just(2usize), Just(3), Just(4), Just(8)]
        .prop_flat_map(|side| (Just(side), prop::collection::vec(-10.0f64..10.0, side * side)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn median_binarization_keeps_strictly_greater_half((side, values) in map_strategy()) {
        prop_assume!(distinct(&values));
        let n = values.len();
        let mask = binarize_median(&tensor(values.clone(), &[side, side]));
        let ones = mask.data().iter().filter(|&&v| v == 1.0).count();
        let expected = if n % 2 == 0 { n / 2 } else { (n - 1) / 2 };
        prop_assert_eq!(ones, expected);
        let med = median(&values);
        for (v, m) in values.iter().zip(mask.data()) {
            prop_assert_eq!(*m == 1.0, *v > med);
        }
    }

    #[test]
    fn blending_a_feature_with_itself_is_identity(
        f in prop::collection::vec(-5.0f64..5.0, 3 * 4),
        bits in prop::collection::vec(0u8..2, 4),
    ) {
        let f = tensor(f, &[3, 2, 2]);
        let m = tensor(bits.iter().map(|&b| f64::from(b)).collect(), &[2, 2]);
        prop_assert!(blend_features(&f, &f, &m).unwrap().bit_eq(&f));
    }

    #[test]
    fn blending_selects_per_position(
        f in prop::collection::vec(-5.0f64..5.0, 2 * 9),
        g in prop::collection::vec(-5.0f64..5.0, 2 * 9),
        bits in prop::collection::vec(0u8..2, 9),
    ) {
        let (ft, gt) = (tensor(f.clone(), &[2, 3, 3]), tensor(g.clone(), &[2, 3, 3]));
        let m = tensor(bits.iter().map(|&b| f64::from(b)).collect(), &[3, 3]);
        let out = blend_features(&ft, &gt, &m).unwrap();
        for (i, v) in out.data().iter().enumerate() {
            let want = if bits[i % 9] == 1 { g[i] } else { f[i] };
            prop_assert_eq!(v.to_bits(), want.to_bits());
        }
    }

    #[test]
    fn low_rank_update_never_exceeds_its_rank(m in 4usize..24, r in 1usize..4, seed in 0u64..1000) {
        let r = r.min(m);
        let mut rng = lagdiff::rng::stream(seed, "rank-prop", 0);
        let a = Tensor::randn(&[m, r], 1.0, &mut rng);
        let b = Tensor::randn(&[r, m], 1.0, &mut rng);
        let w = Tensor::randn(&[m, m, 1], 1.0, &mut rng);
        let eff = apply_residual(&w, &a, &b).unwrap();
        let delta = eff.sub(&w).unwrap().reshape(&[m, m]).unwrap();
        prop_assert!(numerical_rank(&delta) <= r);
    }

    #[test]
    fn ppm_round_trip_is_exact(pixels in prop::collection::vec(any::<u8>(), 3 * 5 * 4)) {
        let img = tensor(pixels.iter().map(|&p| from_u8(p)).collect(), &[3, 5, 4]);
        let back = decode_ppm(&encode_ppm(&img).unwrap()).unwrap();
        prop_assert!(back.bit_eq(&img));
    }

    #[test]
    fn space_to_depth_round_trip(c in 1usize..4, half in 1usize..5, seed in 0u64..100) {
        let side = half * 2;
        let x = Tensor::randn(&[c, side, side], 1.0, &mut lagdiff::rng::stream(seed, "s2d", 0));
        let y = space_to_depth(&x).unwrap();
        prop_assert_eq!(y.shape(), &[4 * c, half, half][..]);
        prop_assert!(depth_to_space(&y).unwrap().bit_eq(&x));
    }

    #[test]
    fn softmax_rows_are_distributions(values in prop::collection::vec(-30.0f64..30.0, 12)) {
        let s = tensor(values, &[3, 4]).softmax_rows().unwrap();
        for row in s.data().chunks(4) {
            prop_assert!(row.iter().all(|&p| p >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn cosine_is_bounded(
        a in prop::collection::vec(-100.0f64..100.0, 6),
        b in prop::collection::vec(-100.0f64..100.0, 6),
    ) {
        let c = cosine(&a, &b);
        prop_assert!((-1.0..=1.0).contains(&c));
    }

    #[test]
    fn deterministic_ddim_ignores_noise(seed in 0u64..1000, t in 1usize..TRAIN_STEPS) {
        let s = make_schedule(TRAIN_STEPS).unwrap();
        let mut rng = lagdiff::rng::stream(seed, "ddim-prop", 0);
        let z = Tensor::randn(&[3, 2, 2], 1.0, &mut rng);
        let e = Tensor::randn(&[3, 2, 2], 1.0, &mut rng);
        let n1 = Tensor::randn(&[3, 2, 2], 1.0, &mut rng);
        let n2 = Tensor::randn(&[3, 2, 2], 1.0, &mut rng);
        let prev = Some(t / 2).filter(|&p| p < t);
        let a = ddim_step(&z, &e, t, prev, &s, 0.0, &n1).unwrap();
        let b = ddim_step(&z, &e, t, prev, &s, 0.0, &n2).unwrap();
        prop_assert!(a.bit_eq(&b));
    }

    #[test]
    fn ddim_with_true_noise_recovers_the_clean_image(seed in 0u64..1000, t in 0usize..900) {
        let s = make_schedule(TRAIN_STEPS).unwrap();
        let mut rng = lagdiff::rng::stream(seed, "ddim-inv", 0);
        let z0 = Tensor::randn(&[3, 2, 2], 0.5, &mut rng);
        let eps = Tensor::randn(&[3, 2, 2], 1.0, &mut rng);
        let zt = q_sample(&z0, t, &eps, &s).unwrap();
        let back = ddim_step(&zt, &eps, t, None, &s, 0.0, &Tensor::zeros(&[3, 2, 2])).unwrap();
        prop_assert!(back.max_abs_diff(&z0).unwrap() < 1e-10);
    }

    #[test]
    fn guidance_is_affine_in_scale(
        u in prop::collection::vec(-3.0f64..3.0, 4),
        c in prop::collection::vec(-3.0f64..3.0, 4),
        w in 0.0f64..10.0,
    ) {
        let (ut, ct) = (tensor(u.clone(), &[4]), tensor(c.clone(), &[4]));
        let out = cfg_combine(&ut, &ct, w).unwrap();
        for i in 0..4 {
            prop_assert!((out.data()[i] - (u[i] + w * (c[i] - u[i]))).abs() < 1e-12);
        }
    }

    #[test]
    fn rank_rule_is_positive_and_near_five_percent(m in 1usize..4096) {
        let r = rank_for(m);
        prop_assert!(r >= 1);
        prop_assert!((r as f64 - 0.05 * m as f64).abs() <= 0.5 || r == 1);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn residual_files_round_trip(seed in 0u64..1000, target_idx in 0usize..5, fixed in prop::option::of(1usize..4)) {
        let targets = [
            TargetSelector::ProjOut,
            TargetSelector::Kv,
            TargetSelector::ProjIn,
            TargetSelector::KvProjOut,
            TargetSelector::KvProjInProjOut,
        ];
        let w = UNetWeights::init(&ArchConfig::default(), 0).unwrap();
        let cfg = PersonalizeConfig {
            target: targets[target_idx],
            rank: fixed.map_or(RankRule::Fraction(0.05), RankRule::Fixed),
            ..PersonalizeConfig::default()
        };
        let rs = init_residuals(&w, &cfg, seed).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.pres");
        save_residuals(&rs, &path).unwrap();
        let back = load_residuals(&path).unwrap();
        prop_assert_eq!(back.param_count(), rs.param_count());
        for (x, y) in rs.blocks.iter().zip(&back.blocks) {
            for ((lx, ax), (ly, ay)) in x.entries().into_iter().zip(y.entries()) {
                prop_assert_eq!(lx, ly);
                prop_assert!(ax.a.bit_eq(&ay.a) && ax.b.bit_eq(&ay.b));
            }
        }
    }
}

#[test]
fn quantization_is_a_bijection_on_bytes() {
    for p in 0..=255u8 {
        assert_eq!(to_u8(from_u8(p)), p);
    }
    assert_eq!(to_u8(-3.0), 0);
    assert_eq!(to_u8(3.0), 255);
}

#[test]
fn image_alignment_is_order_invariant_and_self_consistent() {
    let refs = gen_class_images("cup", 4, 3).unwrap();
    let gen = gen_class_images("cup", 1, 9).unwrap().remove(0);
    let forward = toy_image_alignment(&gen, &refs).unwrap();
    let mut rev = refs.clone();
    rev.reverse();
    assert!((forward - toy_image_alignment(&gen, &rev).unwrap()).abs() < 1e-12);
    assert!((toy_image_alignment(&refs[0], &refs[..1]).unwrap() - 1.0).abs() < 1e-9);
}
