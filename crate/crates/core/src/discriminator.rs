//! Patch discriminators with multi-scale side inputs.
//!
//! Each block is a 4x4 stride-1 convolution followed by a 4x4 stride-2
//! convolution, both with normalization and ReLU, except that the very first
//! convolution of a network is never normalized. Block `k` has width
//! `base * min(2^k, 8)`. Side inputs are concatenated onto the running
//! features when their resolutions meet. A final 4x4 convolution maps to a
//! single-channel score map at `H / 2^(L+1)` with no activation.

use msgdd_tensor::{Padding, Tape, Tensor, Var};

use crate::config::{ModelConfig, NormKind};
use crate::nn::{Activation, Conv, ConvNormAct, Forward, Initializer, Mode, Norm, ParamStore};
use crate::raster::{ImageTensor, ScalePyramid};
use crate::rng::Rng;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DisKind {
    /// Judges the full-resolution image together with the decoder taps.
    Decoder,
    /// Judges the encoder taps.
    Encoder,
    /// Judges `(input, candidate)` pairs at full resolution only.
    Pair,
}

impl DisKind {
    pub fn label(self) -> &'static str {
        match self {
            DisKind::Decoder => "dis_d",
            DisKind::Encoder => "dis_e",
            DisKind::Pair => "dis_pair",
        }
    }
}

#[derive(Clone, Debug)]
struct Block {
    /// Whether a side input is concatenated before this block.
    takes_side: bool,
    first: ConvNormAct,
    second: ConvNormAct,
}

#[derive(Clone, Debug)]
pub struct Discriminator {
    kind: DisKind,
    scales: usize,
    side_channels: usize,
    first_channels: usize,
    blocks: Vec<Block>,
    head: Conv,
    pub params: ParamStore,
}

/// Per-patch realism scores of one sample, `[1, 1, h, w]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMap(Tensor);

impl ScoreMap {
    pub fn from_tensor(tensor: Tensor) -> Result<Self> {
        match tensor.shape() {
            [1, 1, h, w] if h * w > 0 => Ok(Self(tensor)),
            other => Err(Error::Shape(format!("score map must be [1, 1, h, w], got {other:?}"))),
        }
    }

    /// Split a batched `[N, 1, h, w]` score tensor into per-sample maps.
    pub fn split_batch(batch: &Tensor) -> Result<Vec<Self>> {
        let (n, _, _, _) = batch.dims4();
        (0..n).map(|i| Self::from_tensor(batch.sample(i))).collect()
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn resolution(&self) -> (usize, usize) {
        let (_, _, h, w) = self.0.dims4();
        (h, w)
    }

    pub fn mean(&self) -> f64 {
        self.0.sum() / self.0.len() as f64
    }
}

impl Discriminator {
    pub fn new(kind: DisKind, model: &ModelConfig, rng: &mut Rng) -> Self {
        let l = model.scales;
        let mut store = ParamStore::new();
        let mut init = Initializer {
            rng,
            weight_std: model.weight_std(),
        };
        let side = model.output_channels;
        let first_channels = match kind {
            DisKind::Pair => model.input_channels + model.output_channels,
            _ => model.output_channels,
        };
        let levels: Vec<usize> = match kind {
            DisKind::Encoder => (1..=l).collect(),
            _ => (0..=l).collect(),
        };
        let mut blocks = Vec::with_capacity(levels.len());
        let mut prev = 0;
        for (j, &k) in levels.iter().enumerate() {
            let width = model.channels_at(k);
            let takes_side = j > 0 && kind != DisKind::Pair;
            let cin = if j == 0 {
                first_channels
            } else {
                prev + if takes_side { side } else { 0 }
            };
            let first_norm = if j == 0 {
                NormKind::None
            } else {
                model.discriminator_norm
            };
            let name = format!("block{k}");
            let mut layer = |suffix: &str, cin: usize, stride: usize, pad: Padding, norm: NormKind| ConvNormAct {
                conv: Conv::new(
                    &mut store,
                    &mut init,
                    &format!("{name}.conv{suffix}"),
                    cin,
                    width,
                    4,
                    stride,
                    pad,
                    norm == NormKind::None,
                ),
                norm: Norm::new(&mut store, &format!("{name}.norm{suffix}"), norm, width),
                act: Activation::Relu,
            };
            let first = layer("1", cin, 1, Padding::same(4), first_norm);
            let second = layer("2", width, 2, Padding::uniform(1), model.discriminator_norm);
            blocks.push(Block {
                takes_side,
                first,
                second,
            });
            prev = width;
        }
        let head = Conv::new(&mut store, &mut init, "head", prev, 1, 4, 1, Padding::same(4), true);
        Self {
            kind,
            scales: l,
            side_channels: side,
            first_channels,
            blocks,
            head,
            params: store,
        }
    }

    pub fn kind(&self) -> DisKind {
        self.kind
    }

    /// Number of inputs [`forward`](Self::forward) expects.
    pub fn input_count(&self) -> usize {
        match self.kind {
            DisKind::Decoder => self.scales + 1,
            DisKind::Encoder => self.scales,
            DisKind::Pair => 1,
        }
    }

    /// Validate input shapes: channel counts, a shared batch size, and each
    /// side input at exactly half the resolution of the previous input.
    pub fn check_inputs(&self, shapes: &[&[usize]]) -> Result<()> {
        let label = self.kind.label();
        if shapes.len() != self.input_count() {
            return Err(Error::Shape(format!(
                "{label} expects {} inputs, got {}",
                self.input_count(),
                shapes.len()
            )));
        }
        let mut expected: Option<(usize, usize, usize)> = None;
        for (i, shape) in shapes.iter().enumerate() {
            let &[n, c, h, w] = *shape else {
                return Err(Error::Shape(format!("{label} input {i} is not NCHW: {shape:?}")));
            };
            let want_c = if i == 0 {
                self.first_channels
            } else {
                self.side_channels
            };
            if c != want_c {
                return Err(Error::Shape(format!(
                    "{label} input {i} has {c} channels, expected {want_c}"
                )));
            }
            if let Some((en, eh, ew)) = expected {
                if n != en {
                    return Err(Error::Shape(format!("{label} input {i} has batch {n}, expected {en}")));
                }
                if (h, w) != (eh, ew) {
                    return Err(Error::Shape(format!(
                        "{label} input {i} is {h}x{w}, expected {eh}x{ew}"
                    )));
                }
            }
            expected = Some((n, h / 2, w / 2));
        }
        let [_, _, h, w] = <[usize; 4]>::try_from(shapes[0]).expect("checked above");
        let depth = self.blocks.len() as u32;
        let factor = 1usize << depth;
        if h % factor != 0 || w % factor != 0 || h < factor || w < factor {
            return Err(Error::Shape(format!(
                "{label} first input {h}x{w} is not divisible by 2^{depth}"
            )));
        }
        Ok(())
    }

    /// Score map `[N, 1, h, w]` for already-validated inputs.
    pub fn forward(&self, f: &mut Forward, inputs: &[Var]) -> Var {
        let mut x = inputs[0];
        let mut next_side = 1;
        for block in &self.blocks {
            if block.takes_side {
                x = f.tape.concat_channels(&[x, inputs[next_side]]);
                next_side += 1;
            }
            let a = block.first.forward(f, x);
            x = block.second.forward(f, a);
        }
        self.head.forward(f, x)
    }

    fn score(&self, inputs: Vec<Tensor>) -> Result<ScoreMap> {
        let shapes: Vec<&[usize]> = inputs.iter().map(|t| t.shape()).collect();
        self.check_inputs(&shapes)?;
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        let mut f = Forward::new(&mut tape, &self.params, &bound, Mode::Eval);
        let vars: Vec<Var> = inputs.into_iter().map(|t| f.tape.constant(t)).collect();
        let out = self.forward(&mut f, &vars);
        Ok(ScoreMap(tape.value(out).clone()))
    }

    /// Evaluation-mode scores for a full-resolution image and its decoder taps.
    pub fn score_decoder(&self, image: &ImageTensor, taps: &ScalePyramid) -> Result<ScoreMap> {
        self.expect_kind(DisKind::Decoder)?;
        let mut inputs = vec![image.to_tensor()];
        inputs.extend(taps.levels().iter().map(ImageTensor::to_tensor));
        self.score(inputs)
    }

    /// Evaluation-mode scores for a set of encoder taps.
    pub fn score_encoder(&self, taps: &ScalePyramid) -> Result<ScoreMap> {
        self.expect_kind(DisKind::Encoder)?;
        self.score(taps.levels().iter().map(ImageTensor::to_tensor).collect())
    }

    /// Evaluation-mode scores for an `(input, candidate)` pair.
    pub fn score_pair(&self, input: &ImageTensor, candidate: &ImageTensor) -> Result<ScoreMap> {
        self.expect_kind(DisKind::Pair)?;
        let (_, h, w) = input.shape();
        if candidate.height() != h || candidate.width() != w {
            return Err(Error::Shape(format!(
                "pair sizes differ: {h}x{w} vs {}x{}",
                candidate.height(),
                candidate.width()
            )));
        }
        let mut values = input.values().to_vec();
        values.extend_from_slice(candidate.values());
        let c = input.channels() + candidate.channels();
        self.score(vec![Tensor::new(vec![1, c, h, w], values)])
    }

    fn expect_kind(&self, kind: DisKind) -> Result<()> {
        if self.kind == kind {
            Ok(())
        } else {
            Err(Error::Value(format!(
                "{} cannot be used as {}",
                self.kind.label(),
                kind.label()
            )))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded_rng;

    fn model() -> ModelConfig {
        ModelConfig {
            image_size: 32,
            scales: 2,
            base_channels: 2,
            ..ModelConfig::default()
        }
    }

    fn pyramid(size: usize, levels: usize, value: f64) -> ScalePyramid {
        ScalePyramid::new(
            (1..=levels)
                .map(|s| ImageTensor::filled(1, size >> s, size >> s, value).unwrap())
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn score_maps_land_at_the_same_resolution() {
        let m = model();
        let d = Discriminator::new(DisKind::Decoder, &m, &mut seeded_rng(0));
        let e = Discriminator::new(DisKind::Encoder, &m, &mut seeded_rng(0));
        let p = Discriminator::new(DisKind::Pair, &m, &mut seeded_rng(0));
        let img = ImageTensor::filled(1, 32, 32, 0.5).unwrap();
        let taps = pyramid(32, 2, 0.1);
        assert_eq!(d.score_decoder(&img, &taps).unwrap().resolution(), (4, 4));
        assert_eq!(e.score_encoder(&taps).unwrap().resolution(), (4, 4));
        assert_eq!(p.score_pair(&img, &img).unwrap().resolution(), (4, 4));
    }

    #[test]
    fn mismatched_side_inputs_are_rejected() {
        let m = model();
        let d = Discriminator::new(DisKind::Decoder, &m, &mut seeded_rng(0));
        let img = ImageTensor::filled(1, 32, 32, 0.5).unwrap();
        let wrong = ScalePyramid::new(vec![
            ImageTensor::filled(1, 8, 8, 0.0).unwrap(),
            ImageTensor::filled(1, 4, 4, 0.0).unwrap(),
        ])
        .unwrap();
        assert!(matches!(d.score_decoder(&img, &wrong), Err(Error::Shape(_))));
        assert!(d.score_decoder(&img, &pyramid(32, 1, 0.0)).is_err());
        let e = Discriminator::new(DisKind::Encoder, &m, &mut seeded_rng(0));
        assert!(e.score_decoder(&img, &pyramid(32, 2, 0.0)).is_err());
    }

    #[test]
    fn first_convolution_is_not_normalized() {
        let d = Discriminator::new(DisKind::Decoder, &model(), &mut seeded_rng(0));
        assert!(d.params.find("block0.norm1.gamma").is_none());
        assert!(d.params.find("block0.norm2.gamma").is_some());
        let e = Discriminator::new(DisKind::Encoder, &model(), &mut seeded_rng(0));
        assert!(e.params.find("block1.norm1.gamma").is_none());
        assert!(e.params.find("block2.norm1.gamma").is_some());
    }
}
