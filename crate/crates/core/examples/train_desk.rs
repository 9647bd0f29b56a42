//! Desk-scale training on synthetic ellipses, followed by a test-split
//! evaluation of the best checkpoint.
//!
//! Run with `cargo run --release --example train_desk -- [key value]...`,
//! where keys are config keys, e.g. `epochs 5 seed 2 variant unet_only`.

use std::time::Instant;

use msgdd::config::RunConfig;
use msgdd::evaluation::{evaluate, SplitName};
use msgdd::trainer;

fn main() -> msgdd::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let mut config = RunConfig::desk();
    let args: Vec<String> = std::env::args().skip(1).collect();
    for pair in args.chunks(2) {
        config.set(&pair[0], pair.get(1).map_or("", String::as_str))?;
    }
    let start = Instant::now();
    let result = trainer::train(&config, None)?;
    let report = evaluate(&result.best_checkpoint, SplitName::Test, None)?;
    println!(
        "best_val_f1={} (epoch {}) test_f1={} elapsed={:.1}s",
        result.best_val_f1,
        result.best_epoch,
        report.mean_f1,
        start.elapsed().as_secs_f64()
    );
    Ok(())
}
