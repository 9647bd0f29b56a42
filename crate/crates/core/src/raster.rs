//! Image-space value types: single images, scale pyramids and feature maps.

use msgdd_tensor::Tensor;

use crate::{Error, Result};

/// A `channels x height x width` raster with finite values in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    channels: usize,
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl ImageTensor {
    /// Build from channel-major values, checking range and finiteness.
    pub fn new(channels: usize, height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::Shape(format!(
                "image dimensions must be positive, got {channels}x{height}x{width}"
            )));
        }
        if values.len() != channels * height * width {
            return Err(Error::Shape(format!(
                "{channels}x{height}x{width} image needs {} values, got {}",
                channels * height * width,
                values.len()
            )));
        }
        if let Some(bad) = values.iter().find(|v| !(v.is_finite() && v.abs() <= 1.0)) {
            return Err(Error::Value(format!(
                "image value {bad} outside the finite range [-1, 1]"
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            values,
        })
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f64) -> Result<Self> {
        Self::new(channels, height, width, vec![value; channels * height * width])
    }

    /// Sample `index` of an NCHW tensor.
    pub fn from_batch(batch: &Tensor, index: usize) -> Result<Self> {
        let (_, c, h, w) = batch.dims4();
        Self::new(c, h, w, batch.sample(index).into_data())
    }

    /// Stack images of equal shape into an NCHW tensor.
    pub fn batch(images: &[&ImageTensor]) -> Result<Tensor> {
        let first = images.first().ok_or(Error::EmptyBatch)?;
        let mut data = Vec::with_capacity(images.len() * first.values.len());
        for img in images {
            if img.shape() != first.shape() {
                return Err(Error::Shape(format!(
                    "cannot batch {:?} with {:?}",
                    img.shape(),
                    first.shape()
                )));
            }
            data.extend_from_slice(&img.values);
        }
        Ok(Tensor::new(
            vec![images.len(), first.channels, first.height, first.width],
            data,
        ))
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![1, self.channels, self.height, self.width], self.values.clone())
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// `(channels, height, width)`.
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, channel: usize, row: usize, col: usize) -> f64 {
        self.values[(channel * self.height + row) * self.width + col]
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    /// Apply `f` to every value, clamping the result into `[-1, 1]`.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            values: self.values.iter().map(|&v| f(v).clamp(-1.0, 1.0)).collect(),
            ..self.clone()
        }
    }
}

/// Images at halving resolutions: level `s` (1-based) has size `H/2^s`.
#[derive(Clone, Debug, PartialEq)]
pub struct ScalePyramid {
    levels: Vec<ImageTensor>,
}

impl ScalePyramid {
    /// Check that each level halves the previous one with a constant channel count.
    pub fn new(levels: Vec<ImageTensor>) -> Result<Self> {
        if levels.is_empty() {
            return Err(Error::Shape("a scale pyramid needs at least one level".into()));
        }
        for pair in levels.windows(2) {
            let (c0, h0, w0) = pair[0].shape();
            let (c1, h1, w1) = pair[1].shape();
            if c0 != c1 {
                return Err(Error::Shape(format!("pyramid channel count changes from {c0} to {c1}")));
            }
            if h0 != 2 * h1 || w0 != 2 * w1 {
                return Err(Error::Shape(format!(
                    "pyramid level {h1}x{w1} is not half of {h0}x{w0}"
                )));
            }
        }
        Ok(Self { levels })
    }

    /// Number of levels `L`.
    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    /// Level `s` for `s` in `1..=L`.
    pub fn level(&self, s: usize) -> &ImageTensor {
        assert!(s >= 1 && s <= self.levels.len(), "pyramid level {s} out of range");
        &self.levels[s - 1]
    }

    pub fn levels(&self) -> &[ImageTensor] {
        &self.levels
    }

    pub fn into_levels(self) -> Vec<ImageTensor> {
        self.levels
    }
}

/// Unbounded intermediate activations of a single image, `[1, c, h, w]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap(Tensor);

impl FeatureMap {
    pub fn new(tensor: Tensor) -> Result<Self> {
        let (n, ..) = tensor.dims4();
        if n != 1 {
            return Err(Error::Shape(format!("feature map must hold one sample, got {n}")));
        }
        if !tensor.is_finite() {
            return Err(Error::Value("feature map has non-finite values".into()));
        }
        Ok(Self(tensor))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn channels(&self) -> usize {
        self.0.shape()[1]
    }

    /// `(height, width)`.
    pub fn resolution(&self) -> (usize, usize) {
        let (_, _, h, w) = self.0.dims4();
        (h, w)
    }
}

/// The bottleneck features between encoder and decoder.
pub type LatentCode = FeatureMap;
