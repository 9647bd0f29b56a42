//! Gradient norms reaching each generator block at initialization, with the
//! discriminators reading the live taps and with the taps zeroed out.
//!
//! `cargo run --release --example grad_probe -- [lambda_l1]`

use msgdd::config::RunConfig;
use msgdd::data::synth_shapes;
use msgdd::evaluation::grad_probe;
use msgdd::trainer::{Batch, TrainState};

fn main() -> msgdd::Result<()> {
    let lambda: f64 = std::env::args().nth(1).map_or(0.0, |a| a.parse().expect("lambda"));
    let config = RunConfig::desk().validate()?;
    let state = TrainState::new(config.clone())?;
    let samples = synth_shapes(config.batch_size(), config.model.image_size, config.data.data_seed)?;
    let refs: Vec<_> = samples.iter().collect();
    let batch = Batch::new(&refs, config.model.scales)?;

    let report = grad_probe(&state.nets, &batch, &config, lambda);
    println!("lambda_l1 = {lambda}");
    println!("{:<6} {:>12} {:>12}", "block", "taps", "no taps");
    for b in &report.blocks {
        println!("{:<6} {:>12.4e} {:>12.4e}", b.block, b.norm, b.norm_taps_ablated);
    }
    Ok(())
}
