//! Stop a run part-way, resume it from its checkpoint, and check that it
//! ends where an uninterrupted run ends.
//!
//! `cargo run --release --example resume`

use msgdd::config::RunConfig;
use msgdd::trainer;

fn main() -> msgdd::Result<()> {
    let base = std::env::temp_dir().join("msgdd_resume_example");
    let mut config = RunConfig::micro();
    config.model.image_size = 16;
    config.optimizer.epochs = 4;

    config.output_dir = base.join("straight");
    let straight = trainer::train(&config, None)?;

    let mut half = config.clone();
    half.output_dir = base.join("resumed");
    half.optimizer.epochs = 2;
    let first = trainer::train(&half, None)?;
    half.optimizer.epochs = 4;
    let resumed = trainer::train(&half, Some(&first.final_checkpoint))?;

    println!("straight final val F1 {}", straight.final_val_f1);
    println!("resumed  final val F1 {}", resumed.final_val_f1);
    println!(
        "identical weights: {}",
        straight.state.nets.generator.params.fingerprint() == resumed.state.nets.generator.params.fingerprint()
    );
    Ok(())
}
