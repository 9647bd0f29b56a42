//! U-Net generator with side outputs ("taps") at every encoder and decoder scale.
//!
//! With `L` scales and input size `H`:
//!
//! * encoder block `CB_s` (s = 1..L): 3x3 conv at the incoming resolution,
//!   then 3x3 stride-2 conv down to `H/2^s`; its first conv's output is kept
//!   as the U-Net skip for resolution `H/2^(s-1)`;
//! * encoder tap `EO_s = EOL_s(features after CB_s)` at `H/2^s`;
//! * the features after `CB_L` are the latent code `Z`;
//! * decoder block `UCB_s` (s = L..1): nearest 2x upsample, concatenate the
//!   skip of the same resolution, two 3x3 convs, giving features at `H/2^(s-1)`;
//! * decoder tap `DO_s = DOL_s(features at H/2^s)` for s < L, while `DO_L` is
//!   the encoder's bottleneck tap `EO_L` itself;
//! * a final 1x1 head produces the full-resolution output.
//!
//! Every tap layer is 1x1 conv, optional normalization, tanh.

use msgdd_tensor::{Padding, Tape, Var};

use crate::config::{ModelConfig, NormKind};
use crate::nn::{Activation, Bound, Conv, ConvNormAct, Forward, Initializer, Mode, Norm, ParamStore};
use crate::raster::{FeatureMap, ImageTensor, LatentCode, ScalePyramid};
use crate::rng::Rng;
use crate::{Error, Result};

#[derive(Clone, Debug)]
struct DoubleConv {
    first: ConvNormAct,
    second: ConvNormAct,
}

#[derive(Clone, Debug)]
struct TapLayer {
    conv: Conv,
    norm: Norm,
}

impl TapLayer {
    fn new(
        store: &mut ParamStore,
        init: &mut Initializer,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        norm: NormKind,
    ) -> Self {
        let conv = Conv::new(
            store,
            init,
            name,
            in_channels,
            out_channels,
            1,
            1,
            Padding::NONE,
            norm == NormKind::None,
        );
        let norm = Norm::new(store, &format!("{name}.norm"), norm, out_channels);
        Self { conv, norm }
    }

    fn forward(&self, f: &mut Forward, x: Var) -> Var {
        let y = self.conv.forward(f, x);
        let y = self.norm.forward(f, y);
        f.tape.tanh(y)
    }
}

/// Generator parameters and architecture.
#[derive(Clone, Debug)]
pub struct Generator {
    model: ModelConfig,
    encoder: Vec<DoubleConv>,
    encoder_taps: Vec<TapLayer>,
    /// `decoder[s - 1]` is `UCB_s`.
    decoder: Vec<DoubleConv>,
    /// `decoder_taps[s - 1]` is `DOL_s` for s < L.
    decoder_taps: Vec<TapLayer>,
    head: TapLayer,
    pub params: ParamStore,
}

/// Tape variables of one batched forward pass.
#[derive(Clone, Debug)]
pub struct GeneratorVars {
    pub output: Var,
    /// `EO_1..EO_L`.
    pub encoder_taps: Vec<Var>,
    /// `DO_1..DO_L`; the last entry is the same variable as the last encoder tap.
    pub decoder_taps: Vec<Var>,
    pub latent: Var,
}

/// Result of [`Generator::encode`].
#[derive(Clone, Debug)]
pub struct Encoded {
    pub latent: LatentCode,
    pub taps: ScalePyramid,
    /// Skip features for resolutions `H, H/2, ..., H/2^(L-1)`.
    pub skips: Vec<FeatureMap>,
}

/// Full-resolution output plus all taps of one image.
#[derive(Clone, Debug)]
pub struct GeneratorOutput {
    pub output: ImageTensor,
    pub encoder_taps: ScalePyramid,
    pub decoder_taps: ScalePyramid,
    pub latent: LatentCode,
}

fn double_conv(
    store: &mut ParamStore,
    init: &mut Initializer,
    name: &str,
    in_channels: usize,
    out_channels: usize,
    second_stride: usize,
    norm: NormKind,
) -> DoubleConv {
    let first = ConvNormAct {
        conv: Conv::new(
            store,
            init,
            &format!("{name}.conv1"),
            in_channels,
            out_channels,
            3,
            1,
            Padding::same(3),
            norm == NormKind::None,
        ),
        norm: Norm::new(store, &format!("{name}.norm1"), norm, out_channels),
        act: Activation::Relu,
    };
    let second = ConvNormAct {
        conv: Conv::new(
            store,
            init,
            &format!("{name}.conv2"),
            out_channels,
            out_channels,
            3,
            second_stride,
            Padding::uniform(1),
            norm == NormKind::None,
        ),
        norm: Norm::new(store, &format!("{name}.norm2"), norm, out_channels),
        act: Activation::Relu,
    };
    DoubleConv { first, second }
}

impl Generator {
    pub fn new(model: &ModelConfig, rng: &mut Rng) -> Self {
        let l = model.scales;
        let mut store = ParamStore::new();
        let mut init = Initializer {
            rng,
            weight_std: model.weight_std(),
        };
        let gnorm = model.generator_norm;
        let tap_norm = if model.tap_norm { gnorm } else { NormKind::None };
        // width of CB_s / UCB_s
        let width = |s: usize| model.channels_at(s - 1);
        let out = model.output_channels;

        let mut encoder = Vec::with_capacity(l);
        let mut encoder_taps = Vec::with_capacity(l);
        for s in 1..=l {
            let cin = if s == 1 { model.input_channels } else { width(s - 1) };
            encoder.push(double_conv(
                &mut store,
                &mut init,
                &format!("cb{s}"),
                cin,
                width(s),
                2,
                gnorm,
            ));
            encoder_taps.push(TapLayer::new(
                &mut store,
                &mut init,
                &format!("eol{s}"),
                width(s),
                out,
                tap_norm,
            ));
        }
        let mut decoder = Vec::with_capacity(l);
        for s in 1..=l {
            let below = if s == l { width(l) } else { width(s + 1) };
            decoder.push(double_conv(
                &mut store,
                &mut init,
                &format!("ucb{s}"),
                below + width(s),
                width(s),
                1,
                gnorm,
            ));
        }
        let mut decoder_taps = Vec::with_capacity(l.saturating_sub(1));
        for s in 1..l {
            decoder_taps.push(TapLayer::new(
                &mut store,
                &mut init,
                &format!("dol{s}"),
                width(s + 1),
                out,
                tap_norm,
            ));
        }
        let head = TapLayer::new(&mut store, &mut init, "head", width(1), out, tap_norm);
        Self {
            model: model.clone(),
            encoder,
            encoder_taps,
            decoder,
            decoder_taps,
            head,
            params: store,
        }
    }

    pub fn model(&self) -> &ModelConfig {
        &self.model
    }

    pub fn scales(&self) -> usize {
        self.model.scales
    }

    /// Check an NCHW input shape against the architecture.
    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        let [_, c, h, w] = shape else {
            return Err(Error::Shape(format!("expected NCHW input, got {shape:?}")));
        };
        if *c != self.model.input_channels {
            return Err(Error::Shape(format!(
                "generator expects {} input channels, got {c}",
                self.model.input_channels
            )));
        }
        if h != w {
            return Err(Error::Shape(format!("generator input must be square, got {h}x{w}")));
        }
        let factor = 1usize << self.model.scales;
        if h % factor != 0 || *h < factor {
            return Err(Error::Shape(format!(
                "input size {h} is not divisible by 2^{} = {factor}",
                self.model.scales
            )));
        }
        Ok(())
    }

    /// Encoder half: returns `(latent, EO_1..EO_L, skips)`.
    pub fn encode_vars(&self, f: &mut Forward, input: Var) -> (Var, Vec<Var>, Vec<Var>) {
        let mut x = input;
        let mut taps = Vec::with_capacity(self.scales());
        let mut skips = Vec::with_capacity(self.scales());
        for (block, tap) in self.encoder.iter().zip(&self.encoder_taps) {
            let a = block.first.forward(f, x);
            skips.push(a);
            x = block.second.forward(f, a);
            taps.push(tap.forward(f, x));
        }
        (x, taps, skips)
    }

    /// Decoder half: returns `(output, DO_1..DO_L)`. `bottleneck_tap` is `EO_L`
    /// when already computed; otherwise it is recomputed from the latent code.
    pub fn decode_vars(
        &self,
        f: &mut Forward,
        latent: Var,
        skips: &[Var],
        bottleneck_tap: Option<Var>,
    ) -> (Var, Vec<Var>) {
        let l = self.scales();
        let bottleneck = bottleneck_tap.unwrap_or_else(|| self.encoder_taps[l - 1].forward(f, latent));
        let mut taps = vec![bottleneck; l];
        let mut x = latent;
        for s in (1..=l).rev() {
            let up = f.tape.upsample2x(x);
            let merged = f.tape.concat_channels(&[up, skips[s - 1]]);
            let block = &self.decoder[s - 1];
            let a = block.first.forward(f, merged);
            x = block.second.forward(f, a);
            if s >= 2 {
                taps[s - 2] = self.decoder_taps[s - 2].forward(f, x);
            }
        }
        (self.head.forward(f, x), taps)
    }

    /// Full batched forward pass.
    pub fn forward(&self, f: &mut Forward, input: Var) -> GeneratorVars {
        let (latent, encoder_taps, skips) = self.encode_vars(f, input);
        let (output, decoder_taps) = self.decode_vars(f, latent, &skips, encoder_taps.last().copied());
        GeneratorVars {
            output,
            encoder_taps,
            decoder_taps,
            latent,
        }
    }

    fn inference_tape(&self) -> (Tape, Bound) {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        (tape, bound)
    }

    /// Encode one image.
    pub fn encode(&self, input: &ImageTensor) -> Result<Encoded> {
        let x = input.to_tensor();
        self.check_input(x.shape())?;
        let (mut tape, bound) = self.inference_tape();
        let mut f = Forward::new(&mut tape, &self.params, &bound, Mode::Eval);
        let xv = f.tape.constant(x);
        let (latent, taps, skips) = self.encode_vars(&mut f, xv);
        Ok(Encoded {
            latent: FeatureMap::new(tape.value(latent).clone())?,
            taps: pyramid_of(&tape, &taps)?,
            skips: skips
                .iter()
                .map(|s| FeatureMap::new(tape.value(*s).clone()))
                .collect::<Result<_>>()?,
        })
    }

    /// Decode one latent code with the skips from the matching [`encode`](Self::encode).
    pub fn decode(&self, latent: &LatentCode, skips: &[FeatureMap]) -> Result<(ImageTensor, ScalePyramid)> {
        let l = self.scales();
        let top = self.model.channels_at(l - 1);
        if latent.channels() != top {
            return Err(Error::Shape(format!(
                "latent code has {} channels, expected {top}",
                latent.channels()
            )));
        }
        if skips.len() != l {
            return Err(Error::Shape(format!(
                "expected {l} skip feature maps, got {}",
                skips.len()
            )));
        }
        let (lh, lw) = latent.resolution();
        for (r, skip) in skips.iter().enumerate() {
            let want = (lh << (l - r), lw << (l - r));
            if skip.resolution() != want || skip.channels() != self.model.channels_at(r) {
                return Err(Error::Shape(format!(
                    "skip {r} is {}ch {:?}, expected {}ch {:?}",
                    skip.channels(),
                    skip.resolution(),
                    self.model.channels_at(r),
                    want
                )));
            }
        }
        let (mut tape, bound) = self.inference_tape();
        let mut f = Forward::new(&mut tape, &self.params, &bound, Mode::Eval);
        let z = f.tape.constant(latent.tensor().clone());
        let skip_vars: Vec<Var> = skips.iter().map(|s| f.tape.constant(s.tensor().clone())).collect();
        let (out, taps) = self.decode_vars(&mut f, z, &skip_vars, None);
        Ok((ImageTensor::from_batch(tape.value(out), 0)?, pyramid_of(&tape, &taps)?))
    }

    /// Generate the output and every tap for one image.
    pub fn generate(&self, input: &ImageTensor) -> Result<GeneratorOutput> {
        let x = input.to_tensor();
        self.check_input(x.shape())?;
        let (mut tape, bound) = self.inference_tape();
        let mut f = Forward::new(&mut tape, &self.params, &bound, Mode::Eval);
        let xv = f.tape.constant(x);
        let vars = self.forward(&mut f, xv);
        Ok(GeneratorOutput {
            output: ImageTensor::from_batch(tape.value(vars.output), 0)?,
            encoder_taps: pyramid_of(&tape, &vars.encoder_taps)?,
            decoder_taps: pyramid_of(&tape, &vars.decoder_taps)?,
            latent: FeatureMap::new(tape.value(vars.latent).clone())?,
        })
    }

    /// Evaluation-mode output tensor for a batch (no gradients).
    pub fn predict(&self, inputs: &msgdd_tensor::Tensor) -> Result<msgdd_tensor::Tensor> {
        self.check_input(inputs.shape())?;
        let (mut tape, bound) = self.inference_tape();
        let mut f = Forward::new(&mut tape, &self.params, &bound, Mode::Eval);
        let xv = f.tape.constant(inputs.clone());
        let vars = self.forward(&mut f, xv);
        Ok(tape.value(vars.output).clone())
    }

    /// Block names used in gradient reports: `CB_1..CB_L`, `UCB_L..UCB_1`,
    /// `EOL` (encoder tap layers) and `DOL` (decoder tap layers and the head).
    pub fn block_names(&self) -> Vec<String> {
        let l = self.scales();
        let mut names: Vec<String> = (1..=l).map(|s| format!("CB_{s}")).collect();
        names.extend((1..=l).rev().map(|s| format!("UCB_{s}")));
        names.push("EOL".into());
        names.push("DOL".into());
        names
    }

    /// Block of a parameter name, as listed by [`block_names`](Self::block_names).
    pub fn block_of(param_name: &str) -> String {
        let prefix = param_name.split('.').next().unwrap_or(param_name);
        if let Some(s) = prefix.strip_prefix("ucb") {
            format!("UCB_{s}")
        } else if let Some(s) = prefix.strip_prefix("cb") {
            format!("CB_{s}")
        } else if prefix.starts_with("eol") {
            "EOL".into()
        } else {
            "DOL".into()
        }
    }
}

fn pyramid_of(tape: &Tape, vars: &[Var]) -> Result<ScalePyramid> {
    ScalePyramid::new(
        vars.iter()
            .map(|v| ImageTensor::from_batch(tape.value(*v), 0))
            .collect::<Result<_>>()?,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded_rng;

    fn model(size: usize, scales: usize, base: usize) -> ModelConfig {
        ModelConfig {
            image_size: size,
            scales,
            base_channels: base,
            ..ModelConfig::default()
        }
    }

    fn ramp(size: usize) -> ImageTensor {
        let values = (0..size * size).map(|i| ((i * 31 % 97) as f64 / 48.5) - 1.0).collect();
        ImageTensor::new(1, size, size, values).unwrap()
    }

    fn sizes(p: &ScalePyramid) -> Vec<usize> {
        p.levels().iter().map(|l| l.height()).collect()
    }

    #[test]
    fn minimal_depth_has_one_tap_at_half_resolution() {
        let g = Generator::new(&model(16, 1, 2), &mut seeded_rng(0));
        let enc = g.encode(&ramp(16)).unwrap();
        assert_eq!(sizes(&enc.taps), vec![8]);
        assert_eq!(enc.latent.resolution(), (8, 8));
        let (out, taps) = g.decode(&enc.latent, &enc.skips).unwrap();
        assert_eq!(out.height(), 16);
        assert_eq!(sizes(&taps), vec![8]);
    }

    #[test]
    fn zero_input_gives_zero_taps() {
        let g = Generator::new(&model(16, 2, 2), &mut seeded_rng(3));
        let zero = ImageTensor::filled(1, 16, 16, 0.0).unwrap();
        let out = g.generate(&zero).unwrap();
        for level in out.encoder_taps.levels().iter().chain(out.decoder_taps.levels()) {
            assert!(level.values().iter().all(|v| *v == 0.0));
        }
        assert!(out.output.values().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn shapes_hold_for_several_sizes() {
        for size in [32, 64, 256] {
            let g = Generator::new(&model(size, 4, 1), &mut seeded_rng(1));
            let enc = g.encode(&ramp(size)).unwrap();
            let (out, dec) = g.decode(&enc.latent, &enc.skips).unwrap();
            let expected: Vec<usize> = (1..=4).map(|s| size >> s).collect();
            assert_eq!(sizes(&enc.taps), expected);
            assert_eq!(sizes(&dec), expected);
            assert_eq!(out.shape(), (1, size, size));
            assert_eq!(enc.latent.resolution(), (size / 16, size / 16));
        }
    }

    #[test]
    fn bad_inputs_are_rejected() {
        let g = Generator::new(&model(16, 2, 2), &mut seeded_rng(0));
        assert!(g.encode(&ImageTensor::filled(1, 18, 18, 0.0).unwrap()).is_err());
        assert!(g.encode(&ImageTensor::filled(2, 16, 16, 0.0).unwrap()).is_err());
        assert!(g.encode(&ImageTensor::filled(1, 16, 8, 0.0).unwrap()).is_err());
        let enc = g.encode(&ramp(16)).unwrap();
        assert!(g.decode(&enc.latent, &enc.skips[..1]).is_err());
        let mut swapped = enc.skips.clone();
        swapped.swap(0, 1);
        assert!(g.decode(&enc.latent, &swapped).is_err());
    }

    #[test]
    fn parameter_count_matches_closed_form() {
        // every convolution ahead of a normalization layer is bias-free
        let conv = |cin: usize, cout: usize, k: usize| cout * cin * k * k;
        for (scales, base, cin, cout, tap_norm) in [(4, 64, 1, 1, true), (2, 3, 3, 2, false), (5, 2, 1, 1, true)] {
            let m = ModelConfig {
                scales,
                base_channels: base,
                input_channels: cin,
                output_channels: cout,
                image_size: 64,
                tap_norm,
                ..ModelConfig::default()
            };
            let tap = |cin: usize| conv(cin, cout, 1) + if tap_norm { 0 } else { cout };
            let ch = |s: usize| base * (1usize << (s - 1)).min(8);
            let mut expected = 0;
            for s in 1..=scales {
                let prev = if s == 1 { cin } else { ch(s - 1) };
                expected += conv(prev, ch(s), 3) + conv(ch(s), ch(s), 3) + tap(ch(s));
                let below = if s == scales { ch(s) } else { ch(s + 1) };
                expected += conv(below + ch(s), ch(s), 3) + conv(ch(s), ch(s), 3);
                if s < scales {
                    expected += tap(ch(s + 1));
                }
            }
            expected += tap(ch(1));
            let g = Generator::new(&m, &mut seeded_rng(0));
            assert_eq!(g.params.parameter_count(), expected);
        }
    }

    #[test]
    fn block_names_cover_every_parameter() {
        let g = Generator::new(&model(16, 3, 1), &mut seeded_rng(0));
        let names = g.block_names();
        assert_eq!(names.len(), 2 * 3 + 2);
        for e in g.params.entries() {
            assert!(names.contains(&Generator::block_of(&e.name)), "{}", e.name);
        }
    }
}
