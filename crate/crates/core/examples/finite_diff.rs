//! Compare analytic gradients with central differences on the micro model.
//!
//! `cargo run --release --example finite_diff -- [n_params] [seed]`

use msgdd::config::RunConfig;
use msgdd::evaluation::finite_diff_check;

fn main() -> msgdd::Result<()> {
    let mut args = std::env::args().skip(1);
    let n: usize = args.next().map_or(50, |a| a.parse().expect("n_params"));
    let seed: u64 = args.next().map_or(0, |a| a.parse().expect("seed"));
    for step in [1e-2, 1e-3, 1e-4] {
        let r = finite_diff_check(&RunConfig::micro(), n, step, seed)?;
        println!(
            "step {step:.0e}: generator {:.3e} ({} params), discriminators {:.3e} ({} params), {} kinked samples skipped",
            r.generator_max_rel_error, r.generator_checked, r.discriminator_max_rel_error, r.discriminator_checked, r.rejected
        );
    }
    Ok(())
}
