//! Print the resolution of every encoder and decoder tap for one input.
//!
//! `cargo run --release --example shapes -- [image_size] [scales]`

use msgdd::config::ModelConfig;
use msgdd::generator::Generator;
use msgdd::raster::ImageTensor;
use msgdd::rng::seeded_rng;

fn main() -> msgdd::Result<()> {
    let mut args = std::env::args()
        .skip(1)
        .map(|a| a.parse::<usize>().expect("a positive integer"));
    let model = ModelConfig {
        image_size: args.next().unwrap_or(256),
        scales: args.next().unwrap_or(4),
        ..ModelConfig::default()
    };
    let g = Generator::new(&model, &mut seeded_rng(0));
    println!("parameters: {}", g.params.parameter_count());

    let input = ImageTensor::filled(model.input_channels, model.image_size, model.image_size, 0.25)?;
    let out = g.generate(&input)?;
    for s in 1..=model.scales {
        let (eo, d) = (out.encoder_taps.level(s), out.decoder_taps.level(s));
        println!("EO_{s} {:?}  DO_{s} {:?}", eo.shape(), d.shape());
    }
    println!("output {:?}", out.output.shape());
    println!(
        "EO_{l} == DO_{l}: {}",
        out.encoder_taps.level(model.scales) == out.decoder_taps.level(model.scales),
        l = model.scales
    );
    Ok(())
}
