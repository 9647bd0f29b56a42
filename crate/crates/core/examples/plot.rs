//! Train a small model for a few epochs, then plot its loss curve and a
//! grid of its taps.
//!
//! `cargo run --release --example plot -- [OUT_DIR]`

use std::path::PathBuf;

use msgdd::config::RunConfig;
use msgdd::data::synth_shapes;
use msgdd::plot::{plot_metrics, save_tap_grid};
use msgdd::trainer;

fn main() -> msgdd::Result<()> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "runs/plot".into()));
    let mut config = RunConfig::desk();
    config.model.image_size = 32;
    config.model.scales = 3;
    config.optimizer.epochs = 10;
    config.data.train_count = 96;
    config.data.val_count = 16;
    config.data.test_count = 16;
    config.output_dir = out.clone();
    let result = trainer::train(&config, None)?;

    let curve = out.join("loss_curve.png");
    plot_metrics(&result.metrics_path, &curve)?;
    let grid = out.join("taps.png");
    save_tap_grid(&result.state.nets.generator, &synth_shapes(3, 32, 77)?, &grid)?;
    println!("{}\n{}", curve.display(), grid.display());
    Ok(())
}
