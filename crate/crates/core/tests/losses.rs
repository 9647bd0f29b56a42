use msgdd::config::L1Scales;
use msgdd::data::build_pyramid;
use msgdd::discriminator::ScoreMap;
use msgdd::losses::{
    loss_dis_d, loss_dis_e, loss_dis_total, loss_gen_adv, loss_gen_l1, loss_gen_total, tape_lsgan_gen,
};
use msgdd::raster::{ImageTensor, ScalePyramid};
use msgdd_tensor::{Tape, Tensor};
use proptest::prelude::*;

fn maps(values: &[f64], side: usize) -> Vec<ScoreMap> {
    values
        .chunks(side * side)
        .map(|c| ScoreMap::from_tensor(Tensor::new(vec![1, 1, side, side], c.to_vec())).unwrap())
        .collect()
}

fn scores() -> impl Strategy<Value = Vec<f64>> {
    (1usize..5).prop_flat_map(|n| prop::collection::vec(-2.0f64..3.0, n * 4))
}

fn mask(values: Vec<f64>) -> ImageTensor {
    ImageTensor::new(1, 8, 8, values).unwrap()
}

fn image() -> impl Strategy<Value = ImageTensor> {
    prop::collection::vec(-1.0f64..=1.0, 64).prop_map(mask)
}

fn reference_l1(a: &ImageTensor, b: &ImageTensor) -> f64 {
    let n = a.values().len() as f64;
    a.values()
        .iter()
        .zip(b.values())
        .map(|(x, y)| (x - y).abs())
        .sum::<f64>()
        / n
}

#[test]
fn scalar_examples() {
    let one = maps(&[1.0; 8], 2);
    let zero = maps(&[0.0; 8], 2);
    let half = maps(&[0.5; 8], 2);
    assert_eq!(loss_dis_e(&one, &zero).unwrap(), 0.0);
    assert!((loss_dis_e(&zero, &one).unwrap() - 1.0).abs() < 1e-12);
    assert!((loss_dis_e(&half, &half).unwrap() - 0.25).abs() < 1e-12);
    assert!((loss_dis_d(&half, &half).unwrap() - 0.25).abs() < 1e-12);
    assert!((loss_dis_total(0.25, 0.75) - 0.5).abs() < 1e-12);
    assert!((loss_gen_adv(&one, &zero).unwrap() - 0.5).abs() < 1e-12);
    assert!((loss_gen_total(1.0, 0.5, 100.0) - 51.0).abs() < 1e-12);
}

#[test]
fn constant_scores_are_best_at_one_half() {
    let at = |c: f64| loss_dis_d(&maps(&[c; 4], 2), &maps(&[c; 4], 2)).unwrap();
    for c in [0.0, 0.2, 0.4, 0.49, 0.51, 0.7, 1.0] {
        assert!(at(c) > at(0.5), "c = {c}");
    }
}

#[test]
fn a_single_tap_mismatch_counts_once_per_scale() {
    let gt = mask((0..64).map(|i| if i % 5 == 0 { 1.0 } else { -1.0 }).collect());
    let pyramid = build_pyramid(&gt, 2).unwrap();
    let mut levels = pyramid.levels().to_vec();
    levels[0] = levels[0].map(|v| v + 0.25);
    let taps = ScalePyramid::new(levels).unwrap();
    let one = loss_gen_l1(&gt, &taps, &gt, &pyramid, L1Scales::One).unwrap();
    let two = loss_gen_l1(&gt, &taps, &gt, &pyramid, L1Scales::Two).unwrap();
    let four = loss_gen_l1(&gt, &taps, &gt, &pyramid, L1Scales::Four).unwrap();
    assert_eq!(one, 0.0);
    assert!((two - 0.25).abs() < 1e-12);
    assert!((four - 0.25).abs() < 1e-12);
}

#[test]
fn mismatched_levels_are_rejected() {
    let gt = mask(vec![0.0; 64]);
    let p2 = build_pyramid(&gt, 2).unwrap();
    let p3 = build_pyramid(&gt, 3).unwrap();
    assert!(loss_gen_l1(&gt, &p2, &gt, &p3, L1Scales::Four).is_err());
    let small = ImageTensor::new(1, 4, 4, vec![0.0; 16]).unwrap();
    assert!(loss_gen_l1(&small, &p2, &gt, &p2, L1Scales::One).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn losses_are_non_negative(real in scores(), fake in scores(), lambda in 0.0f64..200.0) {
        let n = real.len().min(fake.len());
        let (r, f) = (maps(&real[..n], 2), maps(&fake[..n], 2));
        let e = loss_dis_e(&r, &f).unwrap();
        let d = loss_dis_d(&r, &f).unwrap();
        let adv = loss_gen_adv(&f, &r).unwrap();
        prop_assert!(e >= 0.0 && d >= 0.0 && adv >= 0.0);
        prop_assert!(loss_dis_total(e, d) >= 0.0);
        prop_assert!(loss_gen_total(adv, e, lambda) >= 0.0);
    }

    #[test]
    fn discriminator_losses_ignore_batch_order(
        real in scores(),
        fake in scores(),
        seed in any::<u64>(),
    ) {
        let n = real.len().min(fake.len());
        let (r, f) = (maps(&real[..n], 2), maps(&fake[..n], 2));
        let mut order: Vec<usize> = (0..r.len()).collect();
        // deterministic shuffle driven by the proptest seed
        let mut state = seed | 1;
        for i in (1..order.len()).rev() {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            order.swap(i, (state % (i as u64 + 1)) as usize);
        }
        let pr: Vec<ScoreMap> = order.iter().map(|&i| r[i].clone()).collect();
        let pf: Vec<ScoreMap> = order.iter().rev().map(|&i| f[i].clone()).collect();
        prop_assert!((loss_dis_e(&r, &f).unwrap() - loss_dis_e(&pr, &pf).unwrap()).abs() < 1e-12);
        prop_assert!((loss_dis_d(&r, &f).unwrap() - loss_dis_d(&pr, &pf).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn generator_is_pushed_toward_one(values in prop::collection::vec(-2.0f64..0.999, 4)) {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::new(vec![1, 1, 2, 2], values));
        let loss = tape_lsgan_gen(&mut tape, &[x]);
        let grads = tape.backward(loss);
        prop_assert!(grads.get(x).unwrap().data().iter().all(|g| *g < 0.0));
    }

    #[test]
    fn l1_vanishes_exactly_on_equal_pairs(a in image(), b in image()) {
        let pa = build_pyramid(&a, 3).unwrap();
        let pb = build_pyramid(&b, 3).unwrap();
        let same = loss_gen_l1(&a, &pa, &a, &pa, L1Scales::Four).unwrap();
        prop_assert_eq!(same, 0.0);
        let diff = loss_gen_l1(&a, &pa, &b, &pb, L1Scales::Four).unwrap();
        let expected = reference_l1(&a, &b)
            + (1..=3).map(|s| reference_l1(pa.level(s), pb.level(s))).sum::<f64>();
        prop_assert!((diff - expected).abs() < 1e-12);
        prop_assert_eq!(diff == 0.0, a == b);
    }

    #[test]
    fn more_l1_scales_never_lower_the_loss(a in image(), b in image()) {
        let pa = build_pyramid(&a, 3).unwrap();
        let pb = build_pyramid(&b, 3).unwrap();
        let l = |k| loss_gen_l1(&a, &pa, &b, &pb, k).unwrap();
        prop_assert!(l(L1Scales::One) <= l(L1Scales::Two));
        prop_assert!(l(L1Scales::Two) <= l(L1Scales::Four));
    }
}
