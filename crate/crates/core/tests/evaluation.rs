use std::fs;

use msgdd::config::RunConfig;
use msgdd::evaluation::{
    evaluate, f1_score, finite_diff_check, grad_probe, AblationSpec, AblationTable, MetricReport, SplitName,
};
use msgdd::raster::ImageTensor;
use msgdd::trainer::{self, Batch, TrainState};
use proptest::prelude::*;

fn row(bits: &[u8]) -> ImageTensor {
    let v = bits.iter().map(|b| if *b == 1 { 1.0 } else { -1.0 }).collect();
    ImageTensor::new(1, 1, bits.len(), v).unwrap()
}

/// Dice from set sizes, independent of the confusion-matrix counting.
fn dice(pred: &[u8], gt: &[u8]) -> f64 {
    let p: Vec<usize> = (0..pred.len()).filter(|&i| pred[i] == 1).collect();
    let g: Vec<usize> = (0..gt.len()).filter(|&i| gt[i] == 1).collect();
    if p.is_empty() && g.is_empty() {
        return 1.0;
    }
    let both = p.iter().filter(|i| g.contains(i)).count();
    2.0 * both as f64 / (p.len() + g.len()) as f64
}

#[test]
fn f1_examples() {
    assert_eq!(f1_score(&row(&[1, 1, 0, 0]), &row(&[1, 1, 0, 0]), 0.0).unwrap(), 1.0);
    assert_eq!(f1_score(&row(&[0, 0, 1, 1]), &row(&[1, 1, 0, 0]), 0.0).unwrap(), 0.0);
    // one of two foreground pixels found, no false positives: 2/(2+1)
    let f1 = f1_score(&row(&[1, 0, 0, 0]), &row(&[1, 1, 0, 0]), 0.0).unwrap();
    assert!((f1 - 2.0 / 3.0).abs() < 1e-12);
}

#[test]
fn threshold_is_applied_to_predictions_only() {
    let pred = ImageTensor::new(1, 1, 4, vec![0.2, -0.2, 0.6, -1.0]).unwrap();
    let gt = row(&[1, 0, 1, 0]);
    assert_eq!(f1_score(&pred, &gt, 0.0).unwrap(), 1.0);
    assert!((f1_score(&pred, &gt, 0.5).unwrap() - 2.0 / 3.0).abs() < 1e-12);
}

proptest! {
    #[test]
    fn f1_matches_set_dice(pairs in prop::collection::vec((0u8..2, 0u8..2), 1..64)) {
        let (p, g): (Vec<u8>, Vec<u8>) = pairs.into_iter().unzip();
        let f1 = f1_score(&row(&p), &row(&g), 0.0).unwrap();
        prop_assert!((f1 - dice(&p, &g)).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&f1));
        let swapped = f1_score(&row(&g), &row(&p), 0.0).unwrap();
        prop_assert!((f1 - swapped).abs() < 1e-12);
    }

    #[test]
    fn f1_ignores_a_shared_spatial_permutation(
        pairs in prop::collection::vec((0u8..2, 0u8..2), 2..32),
        rotate in 0usize..32,
    ) {
        let (mut p, mut g): (Vec<u8>, Vec<u8>) = pairs.into_iter().unzip();
        let before = f1_score(&row(&p), &row(&g), 0.0).unwrap();
        let k = rotate % p.len();
        p.rotate_left(k);
        g.rotate_left(k);
        p.reverse();
        g.reverse();
        prop_assert_eq!(before, f1_score(&row(&p), &row(&g), 0.0).unwrap());
    }
}

fn tiny(dir: &std::path::Path) -> RunConfig {
    let mut config = RunConfig::micro();
    config.model.image_size = 16;
    config.model.base_channels = 3;
    config.data.train_count = 4;
    config.data.val_count = 2;
    config.data.test_count = 3;
    config.output_dir = dir.to_path_buf();
    config
}

#[test]
fn evaluation_is_repeatable_and_read_only() {
    let dir = tempfile::tempdir().unwrap();
    let result = trainer::train(&tiny(dir.path()), None).unwrap();
    let before = fs::read(&result.best_checkpoint).unwrap();
    let a = evaluate(&result.best_checkpoint, SplitName::Test, None).unwrap();
    let b = evaluate(&result.best_checkpoint, SplitName::Test, None).unwrap();
    assert_eq!(a, b);
    assert_eq!(before, fs::read(&result.best_checkpoint).unwrap());
    assert_eq!(a.per_image.len(), 3);
    assert!((0.0..=1.0).contains(&a.mean_f1));

    let csv = dir.path().join("report.csv");
    let summary = a.write(&csv).unwrap();
    let text = fs::read_to_string(&csv).unwrap();
    assert_eq!(text.lines().count(), 4);
    assert!(fs::read_to_string(summary).unwrap().contains("split=test"));
}

#[test]
fn reports_average_per_image_scores() {
    let r = MetricReport::new(vec!["a".into(), "b".into()], vec![1.0, 0.5], SplitName::Val, "x".into());
    assert_eq!(r.mean_f1, 0.75);
    assert!(r.summary().contains("images=2"));
}

#[test]
fn probe_covers_every_block_and_both_modes() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny(dir.path()).validate().unwrap();
    let state = TrainState::new(config.clone()).unwrap();
    let samples = msgdd::data::synth_shapes(2, 16, 9).unwrap();
    let refs: Vec<_> = samples.iter().collect();
    let batch = Batch::new(&refs, config.model.scales).unwrap();
    let report = grad_probe(&state.nets, &batch, &config, 0.0);
    assert_eq!(report.blocks.len(), 2 * config.model.scales + 2);
    for b in &report.blocks {
        assert!(b.norm > 0.0, "{}", b.block);
        assert!(b.norm_taps_ablated.is_finite() && b.norm_taps_ablated >= 0.0);
    }
    // with taps ablated and no L1 the encoder tap layers are unreachable
    assert_eq!(report.get("EOL").unwrap().norm_taps_ablated, 0.0);
    let out = dir.path().join("probe.csv");
    report.write_csv(&out).unwrap();
    assert_eq!(
        fs::read_to_string(out).unwrap().lines().count(),
        report.blocks.len() + 1
    );
}

#[test]
fn central_differences_improve_with_a_smaller_step() {
    let coarse = finite_diff_check(&RunConfig::micro(), 30, 1e-2, 4).unwrap();
    let fine = finite_diff_check(&RunConfig::micro(), 30, 1e-3, 4).unwrap();
    assert!(fine.max_rel_error() <= coarse.max_rel_error());
    assert!(fine.max_rel_error() <= 1e-3, "{fine:?}");
    assert!(finite_diff_check(&RunConfig::micro(), 5, 0.5, 4).is_err());
}

#[test]
fn ablation_tables_list_arms_in_order() {
    let specs = AblationSpec::parse_list("msgdd_1l1, msgdd_2l1,msgdd_4l1").unwrap();
    assert_eq!(specs, AblationSpec::KL1);
    assert!(AblationSpec::parse_list("msgdd_4l1,gan").is_err());
    assert_eq!(AblationTable::HEADER[0], "variant");
}
