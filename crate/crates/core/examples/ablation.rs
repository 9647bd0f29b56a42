//! Compare L1 scale sets, or the baselines, under one training budget.
//!
//! `cargo run --release --example ablation -- [kl1|baselines] [epochs]`
//!
//! Uses the desk preset; five epochs per arm take a few minutes.

use msgdd::config::RunConfig;
use msgdd::evaluation::{run_ablation, AblationSpec};

fn main() -> msgdd::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args: Vec<String> = std::env::args().skip(1).collect();
    let (name, specs) = match args.first().map(String::as_str) {
        Some("baselines") => ("baselines", AblationSpec::BASELINES),
        _ => ("kl1", AblationSpec::KL1),
    };
    let mut config = RunConfig::desk();
    config.optimizer.epochs = args.get(1).map_or(5, |e| e.parse().expect("epochs"));
    config.output_dir = config.output_dir.join(format!("ablation_{name}"));
    let table = run_ablation(&config, &specs)?;
    print!("{}", table.to_text());
    Ok(())
}
