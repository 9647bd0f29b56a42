//! Score a checkpoint on one split and write the per-image report.
//!
//! `cargo run --release --example evaluate -- CHECKPOINT [train|val|test]`

use std::path::PathBuf;

use msgdd::evaluation::{evaluate, SplitName};

fn main() -> msgdd::Result<()> {
    let mut args = std::env::args().skip(1);
    let checkpoint = PathBuf::from(args.next().expect("usage: evaluate CHECKPOINT [split]"));
    let split: SplitName = args.next().as_deref().unwrap_or("test").parse()?;
    let report = evaluate(&checkpoint, split, None)?;
    let csv = checkpoint.with_file_name(format!("{split}_report.csv"));
    report.write(&csv)?;

    println!("{}", report.summary());
    let mut ranked: Vec<(&String, &f64)> = report.ids.iter().zip(&report.per_image).collect();
    ranked.sort_by(|a, b| a.1.total_cmp(b.1));
    for (id, f1) in ranked.iter().take(5) {
        println!("  hardest {id}: {f1:.4}");
    }
    Ok(())
}
