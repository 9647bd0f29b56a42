use msgdd::config::{L1Scales, ModelConfig, RunConfig};
use msgdd::data::synth_shapes;
use msgdd::discriminator::{DisKind, Discriminator};
use msgdd::generator::Generator;
use msgdd::nn::{Forward, Mode};
use msgdd::raster::ImageTensor;
use msgdd::rng::seeded_rng;
use msgdd::trainer::{generator_graph, Batch, GraphOptions, TrainState};
use msgdd_tensor::{Tape, Tensor};
use proptest::prelude::*;

fn small_run() -> RunConfig {
    let mut config = RunConfig::micro();
    config.model.image_size = 16;
    config.model.base_channels = 3;
    config.optimizer.batch_size = Some(3);
    config.validate().unwrap()
}

fn batch_for(config: &RunConfig, seed: u64) -> Batch {
    let samples = synth_shapes(config.batch_size(), config.model.image_size, seed).unwrap();
    let refs: Vec<_> = samples.iter().collect();
    Batch::new(&refs, config.model.scales).unwrap()
}

/// Squared gradient norm per generator parameter name.
fn generator_grad_norms(state: &TrainState, batch: &Batch, opts: GraphOptions) -> Vec<(String, f64)> {
    let graph = generator_graph(&state.nets, batch, opts);
    let grads = graph.tape.backward(graph.total);
    let store = &state.nets.generator.params;
    graph
        .bound
        .params()
        .map(|(id, var)| {
            let norm = grads.get(var).map_or(0.0, Tensor::squared_norm);
            (store.entries()[id.index()].name.clone(), norm)
        })
        .collect()
}

#[test]
fn every_generator_parameter_gets_a_gradient() {
    let config = small_run();
    let state = TrainState::new(config.clone()).unwrap();
    let batch = batch_for(&config, 3);
    for (name, norm) in generator_grad_norms(&state, &batch, GraphOptions::for_config(&config)) {
        assert!(norm > 0.0 && norm.is_finite(), "{name}: {norm}");
    }
}

#[test]
fn side_taps_learn_through_the_discriminators_alone() {
    let config = small_run();
    let state = TrainState::new(config.clone()).unwrap();
    let batch = batch_for(&config, 4);
    let opts = GraphOptions {
        lambda_l1: 0.0,
        l1_scales: L1Scales::One,
        ..GraphOptions::for_config(&config)
    };
    let norms = generator_grad_norms(&state, &batch, opts);
    // dol1 and eol1 feed only the side taps, never the output
    for prefix in ["eol1.", "dol1."] {
        let tap: f64 = norms
            .iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, v)| v)
            .sum();
        assert!(tap > 0.0, "{prefix} got no gradient");
    }

    let ablated = generator_grad_norms(
        &state,
        &batch,
        GraphOptions {
            ablate_taps: true,
            ..opts
        },
    );
    let dead: f64 = ablated
        .iter()
        .filter(|(n, _)| n.starts_with("eol1.") || n.starts_with("dol1."))
        .map(|(_, v)| v)
        .sum();
    assert_eq!(dead, 0.0);
}

#[test]
fn the_decoder_discriminator_reads_every_side_input() {
    let model = ModelConfig {
        image_size: 16,
        scales: 3,
        base_channels: 2,
        ..ModelConfig::default()
    };
    let dis = Discriminator::new(DisKind::Decoder, &model, &mut seeded_rng(5));
    let mut rng = seeded_rng(6);
    let mut tape = Tape::new();
    let inputs: Vec<_> = [16, 8, 4, 2]
        .iter()
        .map(|&s| {
            let values = (0..2 * s * s)
                .map(|_| rand::Rng::random_range(&mut rng, -1.0..1.0))
                .collect();
            tape.param(Tensor::new(vec![2, 1, s, s], values))
        })
        .collect();
    let bound = dis.params.bind(&mut tape, false);
    let score = {
        let mut f = Forward::new(&mut tape, &dis.params, &bound, Mode::Train);
        dis.forward(&mut f, &inputs)
    };
    let loss = tape.mean(score);
    let grads = tape.backward(loss);
    for (i, x) in inputs.iter().enumerate() {
        let g = grads.get(*x).map_or(0.0, Tensor::squared_norm);
        assert!(g > 0.0, "input {i} is disconnected");
    }
}

fn permute(batch: &Tensor, order: &[usize]) -> Tensor {
    let per = batch.len() / batch.shape()[0];
    let data = order
        .iter()
        .flat_map(|&i| batch.data()[i * per..(i + 1) * per].iter().copied())
        .collect();
    Tensor::new(batch.shape().to_vec(), data)
}

#[test]
fn evaluation_is_per_sample() {
    let config = small_run();
    let state = TrainState::new(config.clone()).unwrap();
    let batch = batch_for(&config, 7);
    let g = &state.nets.generator;
    let order = [2, 0, 1];
    let direct = permute(&g.predict(&batch.input).unwrap(), &order);
    let permuted = g.predict(&permute(&batch.input, &order)).unwrap();
    for (a, b) in direct.data().iter().zip(permuted.data()) {
        assert!((a - b).abs() < 1e-12);
    }

    let dis = state.nets.dis_d.as_ref().unwrap();
    let score = |x: &Tensor, levels: &[Tensor]| {
        let mut tape = Tape::new();
        let bound = dis.params.bind(&mut tape, false);
        let mut f = Forward::new(&mut tape, &dis.params, &bound, Mode::Eval);
        let mut vars = vec![f.tape.constant(x.clone())];
        vars.extend(levels.iter().map(|l| f.tape.constant(l.clone())));
        let out = dis.forward(&mut f, &vars);
        tape.value(out).clone()
    };
    let direct = permute(&score(&batch.target, &batch.target_levels), &order);
    let levels: Vec<Tensor> = batch.target_levels.iter().map(|l| permute(l, &order)).collect();
    let permuted = score(&permute(&batch.target, &order), &levels);
    for (a, b) in direct.data().iter().zip(permuted.data()) {
        assert!((a - b).abs() < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn outputs_and_taps_stay_in_range(seed in any::<u64>(), values in prop::collection::vec(-1.0f64..=1.0, 256)) {
        let model = ModelConfig { image_size: 16, scales: 3, base_channels: 2, ..ModelConfig::default() };
        let g = Generator::new(&model, &mut seeded_rng(seed));
        let out = g.generate(&ImageTensor::new(1, 16, 16, values).unwrap()).unwrap();
        let in_range = |img: &ImageTensor| img.values().iter().all(|v| v.is_finite() && v.abs() <= 1.0);
        prop_assert!(in_range(&out.output));
        prop_assert!(out.encoder_taps.levels().iter().all(in_range));
        prop_assert!(out.decoder_taps.levels().iter().all(in_range));
        prop_assert_eq!(out.encoder_taps.level(3), out.decoder_taps.level(3));
    }
}
