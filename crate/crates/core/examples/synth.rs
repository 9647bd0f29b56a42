//! Write a synthetic ellipse dataset to disk and load it back.
//!
//! `cargo run --release --example synth -- OUT_DIR [count] [size]`

use msgdd::data::{foreground_fraction, load_dataset, synth_shapes, write_dataset, DatasetManifest};

fn main() -> msgdd::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let root = args.first().map_or("synthetic", String::as_str);
    let count: usize = args.get(1).map_or(20, |a| a.parse().expect("count"));
    let size: usize = args.get(2).map_or(64, |a| a.parse().expect("size"));

    let samples = synth_shapes(count, size, 1)?;
    write_dataset(root.as_ref(), &samples)?;

    let test_count = count / 5;
    let splits = load_dataset(&DatasetManifest {
        root: root.into(),
        train_count: count - 2 * test_count,
        val_count: test_count,
        test_count,
        image_size: size,
    })?;
    let fractions: Vec<f64> = splits.train.iter().map(|s| foreground_fraction(&s.target)).collect();
    let mean = fractions.iter().sum::<f64>() / fractions.len() as f64;
    println!(
        "{root}: {} train / {} val / {} test, mean foreground {:.3}",
        splits.train.len(),
        splits.val.len(),
        splits.test.len(),
        mean
    );
    Ok(())
}
