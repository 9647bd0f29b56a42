use std::fs;

use msgdd::checkpoint::Checkpoint;
use msgdd::config::{RunConfig, Variant};
use msgdd::data::synth_shapes;
use msgdd::trainer::{
    self, train_step, Batch, TrainState, BEST_CHECKPOINT, FINAL_CHECKPOINT, METRICS_FILE, METRICS_HEADER,
};
use msgdd::Error;

fn tiny(dir: &std::path::Path) -> RunConfig {
    let mut config = RunConfig::micro();
    config.model.image_size = 16;
    config.model.base_channels = 3;
    config.optimizer.batch_size = Some(2);
    config.data.train_count = 4;
    config.data.val_count = 2;
    config.data.test_count = 2;
    config.output_dir = dir.to_path_buf();
    config
}

fn batch(config: &RunConfig, n: usize, seed: u64) -> Batch {
    let samples = synth_shapes(n, config.model.image_size, seed).unwrap();
    let refs: Vec<_> = samples.iter().collect();
    Batch::new(&refs, config.model.scales).unwrap()
}

fn fingerprints(state: &TrainState) -> Vec<String> {
    state.nets.stores().iter().map(|(_, s)| s.fingerprint()).collect()
}

#[test]
fn a_step_is_deterministic_and_moves_every_network() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny(dir.path()).validate().unwrap();
    let b = batch(&config, 2, 5);
    let mut a = TrainState::new(config.clone()).unwrap();
    let mut c = TrainState::new(config).unwrap();
    let before = fingerprints(&a);
    let la = train_step(&mut a, &b, 1, 0).unwrap();
    let lc = train_step(&mut c, &b, 1, 0).unwrap();
    assert_eq!(la, lc);
    assert!(la.is_valid());
    assert_eq!(fingerprints(&a), fingerprints(&c));
    for (x, y) in before.iter().zip(fingerprints(&a)) {
        assert_ne!(*x, y);
    }
}

#[test]
fn generator_update_does_not_depend_on_discriminator_gradients() {
    // instance norm keeps the discriminators free of running statistics, so
    // a zero learning rate must leave their fingerprints unchanged
    let dir = tempfile::tempdir().unwrap();
    let mut config = tiny(dir.path());
    config.model.discriminator_norm = msgdd::config::NormKind::Instance;
    let config = config.validate().unwrap();
    let mut state = TrainState::new(config.clone()).unwrap();
    state.opt_e.as_mut().unwrap().lr = 0.0;
    state.opt_d.as_mut().unwrap().lr = 0.0;
    let before = fingerprints(&state);
    train_step(&mut state, &batch(&config, 2, 8), 1, 0).unwrap();
    let after = fingerprints(&state);
    assert_ne!(before[0], after[0]);
    assert_eq!(before[1..], after[1..]);
}

#[test]
fn unet_only_overfits_a_small_set() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = tiny(dir.path());
    config.variant = Variant::UnetOnly;
    config.model.base_channels = 4;
    // a normalized head has zero mean per image, which caps how low L1 can go
    config.model.tap_norm = false;
    config.optimizer.learning_rate = 2e-3;
    let config = config.validate().unwrap();
    let mut state = TrainState::new(config.clone()).unwrap();
    let samples = synth_shapes(10, 16, 21).unwrap();
    let refs: Vec<_> = samples.iter().collect();
    let b = Batch::new(&refs, config.model.scales).unwrap();
    let first = train_step(&mut state, &b, 1, 0).unwrap().l_g_l1;
    let mut last = first;
    for step in 1..200 {
        last = train_step(&mut state, &b, 1, step).unwrap().l_g_l1;
    }
    assert!(last <= 0.5 * first, "L1 went from {first} to {last}");
}

#[test]
fn one_epoch_writes_one_checkpoint_pair_and_one_row() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = tiny(dir.path());
    config.optimizer.epochs = 1;
    config.tap_grid_every = 1;
    let result = trainer::train(&config, None).unwrap();
    let mut files: Vec<String> = fs::read_dir(dir.path())
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    files.sort();
    assert_eq!(
        files,
        [BEST_CHECKPOINT, FINAL_CHECKPOINT, METRICS_FILE, "taps_epoch001.png"]
    );
    let csv = fs::read_to_string(&result.metrics_path).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[0], METRICS_HEADER);
    assert_eq!(result.best_epoch, 1);
    assert_eq!(result.records.len(), 1);
}

#[test]
fn resume_appends_and_matches_a_straight_run() {
    let straight_dir = tempfile::tempdir().unwrap();
    let resumed_dir = tempfile::tempdir().unwrap();
    let mut config = tiny(straight_dir.path());
    config.optimizer.epochs = 3;
    let straight = trainer::train(&config, None).unwrap();

    let mut first = tiny(resumed_dir.path());
    first.optimizer.epochs = 1;
    let partial = trainer::train(&first, None).unwrap();
    let mut rest = first.clone();
    rest.optimizer.epochs = 3;
    let resumed = trainer::train(&rest, Some(&partial.final_checkpoint)).unwrap();

    assert_eq!(resumed.records.len(), 2);
    assert_eq!(
        fs::read_to_string(&straight.metrics_path).unwrap(),
        fs::read_to_string(&resumed.metrics_path).unwrap()
    );
    assert_eq!(fingerprints(&straight.state), fingerprints(&resumed.state));
}

#[test]
fn damaged_checkpoints_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny(dir.path()).validate().unwrap();
    let path = dir.path().join("state.ckpt");
    TrainState::new(config).unwrap().save(&path).unwrap();
    let bytes = fs::read(&path).unwrap();

    let mut flipped = bytes.clone();
    flipped[bytes.len() / 2] ^= 0x10;
    assert!(matches!(Checkpoint::from_bytes(&flipped), Err(Error::Checkpoint(_))));
    assert!(matches!(
        Checkpoint::from_bytes(&bytes[..bytes.len() - 40]),
        Err(Error::Checkpoint(_))
    ));
    assert!(matches!(Checkpoint::from_bytes(&bytes[..5]), Err(Error::Checkpoint(_))));

    let truncated = dir.path().join("short.ckpt");
    fs::write(&truncated, &bytes[..bytes.len() / 3]).unwrap();
    assert!(TrainState::load(&truncated, None).is_err());
}

#[test]
fn a_deeper_checkpoint_does_not_load_into_a_shallower_model() {
    let dir = tempfile::tempdir().unwrap();
    let mut shallow = tiny(dir.path());
    shallow.model.image_size = 64;
    let mut deep = shallow.clone();
    deep.model.scales = 4;
    let path = dir.path().join("deep.ckpt");
    TrainState::new(deep).unwrap().save(&path).unwrap();
    let shallow = shallow.validate().unwrap();
    match TrainState::load(&path, Some(shallow)) {
        Err(Error::Shape(msg)) => assert!(msg.contains("gen/"), "{msg}"),
        Err(Error::Checkpoint(msg)) => assert!(msg.contains('/'), "{msg}"),
        other => panic!("expected a mismatch error, got {:?}", other.map(|_| ())),
    }
}

#[test]
fn divergence_aborts_with_the_offending_term() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = tiny(dir.path());
    config.optimizer.learning_rate = 1e200;
    config.optimizer.epochs = 2;
    match trainer::train(&config, None) {
        Err(Error::NonFinite { epoch, term, .. }) => {
            assert!(epoch >= 1);
            assert!(!term.is_empty());
        }
        other => panic!("expected a non-finite abort, got {:?}", other.map(|r| r.final_val_f1)),
    }
}
