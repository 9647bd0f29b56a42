//! Paired image/mask datasets: loading, synthetic generation, augmentation
//! and scale pyramids.
//!
//! On disk a dataset is `root/images/<id>.png` plus `root/masks/<id>.png`,
//! both 8-bit grayscale. Images are padded to square with black, resized to
//! the target size, and mapped to `[-1, 1]`. Masks are binarized at mid-gray
//! to `{-1, +1}`. Splits are taken in sorted-id order: the first
//! `train_count` pairs, then `val_count`, then `test_count`.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::{self, FilterType};
use image::{GrayImage, Luma};
use msgdd_tensor::Tensor;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::config::{AugmentPolicy, DataConfig};
use crate::raster::{ImageTensor, ScalePyramid};
use crate::rng::{derived_rng, Rng, Stream};
use crate::{Error, Result};

/// One input image with its target mask.
#[derive(Clone, Debug, PartialEq)]
pub struct PairedSample {
    pub input: ImageTensor,
    pub target: ImageTensor,
    pub id: String,
}

impl PairedSample {
    pub fn new(input: ImageTensor, target: ImageTensor, id: impl Into<String>) -> Result<Self> {
        if (input.height(), input.width()) != (target.height(), target.width()) {
            return Err(Error::Shape(format!(
                "input {}x{} and target {}x{} differ in resolution",
                input.height(),
                input.width(),
                target.height(),
                target.width()
            )));
        }
        Ok(Self {
            input,
            target,
            id: id.into(),
        })
    }
}

/// Where a dataset lives and how it is split.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub train_count: usize,
    pub val_count: usize,
    pub test_count: usize,
    /// Side length every pair is resized to.
    pub image_size: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Splits {
    pub train: Vec<PairedSample>,
    pub val: Vec<PairedSample>,
    pub test: Vec<PairedSample>,
}

impl Splits {
    fn from_ordered(mut all: Vec<PairedSample>, train: usize, val: usize) -> Self {
        let test = all.split_off(train + val);
        let val = all.split_off(train);
        Self { train: all, val, test }
    }
}

/// Repeated 2x2 average pooling; level `s` is the image pooled `s` times.
pub fn build_pyramid(image: &ImageTensor, levels: usize) -> Result<ScalePyramid> {
    let factor = 1usize << levels;
    if !image.height().is_multiple_of(factor) || !image.width().is_multiple_of(factor) {
        return Err(Error::Shape(format!(
            "{}x{} is not divisible by 2^{levels} = {factor}",
            image.height(),
            image.width()
        )));
    }
    let batch = image.to_tensor();
    ScalePyramid::new(
        tensor_pyramid(&batch, levels)
            .iter()
            .map(|t| ImageTensor::from_batch(t, 0))
            .collect::<Result<_>>()?,
    )
}

/// Pyramid of an NCHW batch: `levels` tensors at half, quarter, ... resolution.
pub fn tensor_pyramid(batch: &Tensor, levels: usize) -> Vec<Tensor> {
    let mut out: Vec<Tensor> = Vec::with_capacity(levels);
    for _ in 0..levels {
        let next = msgdd_tensor::avg_pool2x(out.last().unwrap_or(batch));
        out.push(next);
    }
    out
}

fn binarize(v: f64) -> f64 {
    if v >= 0.0 {
        1.0
    } else {
        -1.0
    }
}

fn pixel_to_value(p: u8) -> f64 {
    p as f64 / 127.5 - 1.0
}

fn value_to_pixel(v: f64) -> u8 {
    ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

fn read_gray(path: &Path) -> Result<GrayImage> {
    Ok(image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_luma8())
}

/// Pad to a centered square with black, then resize to `size` with a
/// triangle filter.
fn square_resize(img: &GrayImage, size: u32) -> GrayImage {
    let (w, h) = img.dimensions();
    let side = w.max(h);
    let mut canvas = GrayImage::from_pixel(side, side, Luma([0]));
    imageops::replace(&mut canvas, img, ((side - w) / 2) as i64, ((side - h) / 2) as i64);
    if side == size {
        canvas
    } else {
        imageops::resize(&canvas, size, size, FilterType::Triangle)
    }
}

fn gray_to_image(img: &GrayImage, mask: bool) -> Result<ImageTensor> {
    let values = img
        .pixels()
        .map(|p| {
            if mask {
                if p.0[0] >= 128 {
                    1.0
                } else {
                    -1.0
                }
            } else {
                pixel_to_value(p.0[0])
            }
        })
        .collect();
    ImageTensor::new(1, img.height() as usize, img.width() as usize, values)
}

fn png_ids(dir: &Path) -> Result<Vec<String>> {
    if !dir.is_dir() {
        return Ok(Vec::new());
    }
    let mut ids = Vec::new();
    for entry in fs::read_dir(dir).map_err(Error::io(format!("reading {}", dir.display())))? {
        let path = entry.map_err(Error::io(format!("reading {}", dir.display())))?.path();
        if path.extension().and_then(|e| e.to_str()) == Some("png") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                ids.push(stem.to_string());
            }
        }
    }
    ids.sort();
    Ok(ids)
}

/// Load every pair under `manifest.root` and split it in sorted-id order.
pub fn load_dataset(manifest: &DatasetManifest) -> Result<Splits> {
    if !manifest.root.is_dir() {
        return Err(Error::Data(format!(
            "dataset root {} does not exist",
            manifest.root.display()
        )));
    }
    let image_dir = manifest.root.join("images");
    let mask_dir = manifest.root.join("masks");
    let images = png_ids(&image_dir)?;
    let masks = png_ids(&mask_dir)?;
    if images.is_empty() && masks.is_empty() {
        return Err(Error::Data(format!("no pairs found under {}", manifest.root.display())));
    }
    if let Some(id) = images.iter().find(|id| masks.binary_search(id).is_err()) {
        return Err(Error::Data(format!("image {id} has no mask partner")));
    }
    if let Some(id) = masks.iter().find(|id| images.binary_search(id).is_err()) {
        return Err(Error::Data(format!("mask {id} has no image partner")));
    }
    let wanted = manifest.train_count + manifest.val_count + manifest.test_count;
    if wanted != images.len() {
        return Err(Error::Data(format!(
            "split sizes {}/{}/{} sum to {wanted} but {} pairs were found",
            manifest.train_count,
            manifest.val_count,
            manifest.test_count,
            images.len()
        )));
    }
    let size = manifest.image_size as u32;
    let samples = images
        .iter()
        .map(|id| {
            let file = format!("{id}.png");
            let input = gray_to_image(&square_resize(&read_gray(&image_dir.join(&file))?, size), false)?;
            let target = gray_to_image(&square_resize(&read_gray(&mask_dir.join(&file))?, size), true)?;
            PairedSample::new(input, target, id.clone())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Splits::from_ordered(samples, manifest.train_count, manifest.val_count))
}

fn to_gray(img: &ImageTensor) -> GrayImage {
    let (w, h) = (img.width() as u32, img.height() as u32);
    GrayImage::from_fn(w, h, |x, y| Luma([value_to_pixel(img.get(0, y as usize, x as usize))]))
}

/// Write samples in the on-disk layout read by [`load_dataset`].
pub fn write_dataset(root: &Path, samples: &[PairedSample]) -> Result<()> {
    for sub in ["images", "masks"] {
        let dir = root.join(sub);
        fs::create_dir_all(&dir).map_err(Error::io(format!("creating {}", dir.display())))?;
    }
    for s in samples {
        for (sub, img) in [("images", &s.input), ("masks", &s.target)] {
            let path = root.join(sub).join(format!("{}.png", s.id));
            to_gray(img).save(&path).map_err(|source| Error::Image {
                path: path.clone(),
                source,
            })?;
        }
    }
    Ok(())
}

/// Recorded geometric transform, applied identically to input and mask.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Transform {
    pub flip_horizontal: bool,
    pub flip_vertical: bool,
    pub affine: Option<Affine>,
}

/// Scale and rotation about the image center, then a translation in pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Affine {
    pub scale: f64,
    pub angle: f64,
    pub shift_x: f64,
    pub shift_y: f64,
}

impl Transform {
    pub const IDENTITY: Transform = Transform {
        flip_horizontal: false,
        flip_vertical: false,
        affine: None,
    };

    /// Draw a transform for `policy` at resolution `size`.
    pub fn sample(policy: AugmentPolicy, size: usize, rng: &mut Rng) -> Self {
        if policy == AugmentPolicy::None {
            return Self::IDENTITY;
        }
        let flip_horizontal = rng.random_bool(0.5);
        let flip_vertical = rng.random_bool(0.5);
        let affine = (policy == AugmentPolicy::FlipsAffine).then(|| {
            let max_shift = 0.04 * size as f64;
            Affine {
                scale: rng.random_range(0.92..=1.08),
                angle: rng.random_range(-15.0..=15.0) * PI / 180.0,
                shift_x: rng.random_range(-max_shift..=max_shift),
                shift_y: rng.random_range(-max_shift..=max_shift),
            }
        });
        Self {
            flip_horizontal,
            flip_vertical,
            affine,
        }
    }

    /// Apply to one image; masks are re-binarized after resampling.
    pub fn apply(&self, img: &ImageTensor, mask: bool) -> ImageTensor {
        let (c, h, w) = img.shape();
        let mut values = img.values().to_vec();
        if self.flip_horizontal || self.flip_vertical {
            for ch in 0..c {
                for r in 0..h {
                    for col in 0..w {
                        let sr = if self.flip_vertical { h - 1 - r } else { r };
                        let sc = if self.flip_horizontal { w - 1 - col } else { col };
                        values[(ch * h + r) * w + col] = img.get(ch, sr, sc);
                    }
                }
            }
        }
        if let Some(a) = self.affine {
            values = a.resample(&values, c, h, w);
            if mask {
                values.iter_mut().for_each(|v| *v = binarize(*v));
            }
        }
        ImageTensor::new(c, h, w, values).expect("transform keeps values in range")
    }
}

impl Affine {
    /// Inverse-mapped bilinear resampling; outside pixels read as -1.
    fn resample(&self, src: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
        let (cx, cy) = (w as f64 / 2.0, h as f64 / 2.0);
        let (sin, cos) = self.angle.sin_cos();
        let read = |ch: usize, r: isize, col: isize| -> f64 {
            if r < 0 || col < 0 || r >= h as isize || col >= w as isize {
                -1.0
            } else {
                src[(ch * h + r as usize) * w + col as usize]
            }
        };
        let mut out = vec![0.0; src.len()];
        for r in 0..h {
            for col in 0..w {
                let u = (col as f64 + 0.5 - cx - self.shift_x) / self.scale;
                let v = (r as f64 + 0.5 - cy - self.shift_y) / self.scale;
                let sx = cos * u + sin * v + cx - 0.5;
                let sy = -sin * u + cos * v + cy - 0.5;
                let (x0, y0) = (sx.floor(), sy.floor());
                let (fx, fy) = (sx - x0, sy - y0);
                let (x0, y0) = (x0 as isize, y0 as isize);
                for ch in 0..c {
                    let top = read(ch, y0, x0) * (1.0 - fx) + read(ch, y0, x0 + 1) * fx;
                    let bottom = read(ch, y0 + 1, x0) * (1.0 - fx) + read(ch, y0 + 1, x0 + 1) * fx;
                    out[(ch * h + r) * w + col] = (top * (1.0 - fy) + bottom * fy).clamp(-1.0, 1.0);
                }
            }
        }
        out
    }
}

/// Augmented sample together with the transform that produced it.
pub fn augment_recorded(sample: &PairedSample, rng: &mut Rng, policy: AugmentPolicy) -> (PairedSample, Transform) {
    let t = Transform::sample(policy, sample.input.height(), rng);
    let out = PairedSample {
        input: t.apply(&sample.input, false),
        target: t.apply(&sample.target, true),
        id: sample.id.clone(),
    };
    (out, t)
}

pub fn augment(sample: &PairedSample, rng: &mut Rng, policy: AugmentPolicy) -> PairedSample {
    augment_recorded(sample, rng, policy).0
}

/// Foreground fraction of a `{-1, +1}` mask.
pub fn foreground_fraction(mask: &ImageTensor) -> f64 {
    mask.values().iter().filter(|v| **v > 0.0).count() as f64 / mask.values().len() as f64
}

/// One synthetic ellipse sample; `index` selects an independent stream.
pub fn synth_sample(resolution: usize, seed: u64, index: usize) -> PairedSample {
    let mut rng = derived_rng(seed, Stream::Synthetic, index as u64);
    let size = resolution as f64;
    let noise = Normal::new(0.0, 0.12).expect("positive std");
    loop {
        let cx = rng.random_range(0.35..=0.65) * size;
        let cy = rng.random_range(0.35..=0.65) * size;
        let a = rng.random_range(0.17..=0.32) * size;
        let b = a * rng.random_range(0.6..=1.0);
        let theta = rng.random_range(0.0..PI);
        let ring_width = (size / 40.0).max(1.0);
        let waves: Vec<(f64, f64, f64)> = (0..3)
            .map(|_| {
                (
                    rng.random_range(1.0..4.0) * 2.0 * PI / size,
                    rng.random_range(1.0..4.0) * 2.0 * PI / size,
                    rng.random_range(0.0..2.0 * PI),
                )
            })
            .collect();
        let (sin, cos) = theta.sin_cos();
        let mut input = Vec::with_capacity(resolution * resolution);
        let mut target = Vec::with_capacity(resolution * resolution);
        for r in 0..resolution {
            for c in 0..resolution {
                let (x, y) = (c as f64 + 0.5 - cx, r as f64 + 0.5 - cy);
                let (u, v) = (cos * x + sin * y, -sin * x + cos * y);
                let rho = ((u / a).powi(2) + (v / b).powi(2)).sqrt();
                // distance to the boundary in pixels, along the minor axis scale
                let edge = (rho - 1.0) * b / ring_width;
                let texture: f64 = waves
                    .iter()
                    .map(|(kx, ky, phase)| (kx * c as f64 + ky * r as f64 + phase).sin())
                    .sum::<f64>()
                    * 0.05;
                let ring = 1.3 * (-edge * edge).exp();
                let value = -0.55 + texture + ring + noise.sample(&mut rng);
                input.push(value.clamp(-1.0, 1.0));
                target.push(if rho <= 1.0 { 1.0 } else { -1.0 });
            }
        }
        let input = ImageTensor::new(1, resolution, resolution, input).expect("clamped");
        let target = ImageTensor::new(1, resolution, resolution, target).expect("binary");
        let fraction = foreground_fraction(&target);
        if (0.05..=0.6).contains(&fraction) {
            return PairedSample::new(input, target, format!("{index:05}")).expect("same size");
        }
    }
}

/// `n` synthetic ellipse pairs, deterministic in `seed`.
pub fn synth_shapes(n: usize, resolution: usize, seed: u64) -> Result<Vec<PairedSample>> {
    if n == 0 {
        return Err(Error::Value("synthetic dataset needs at least one sample".into()));
    }
    if !resolution.is_power_of_two() || resolution < 2 {
        return Err(Error::Value(format!(
            "synthetic resolution {resolution} is not a power of two"
        )));
    }
    Ok((0..n).map(|i| synth_sample(resolution, seed, i)).collect())
}

/// Train/val/test splits for `data`: loaded from disk when a root is set,
/// synthesized otherwise.
pub fn load_splits(data: &DataConfig, image_size: usize) -> Result<Splits> {
    match &data.root {
        Some(root) => load_dataset(&DatasetManifest {
            root: root.clone(),
            train_count: data.train_count,
            val_count: data.val_count,
            test_count: data.test_count,
            image_size,
        }),
        None => {
            let total = data.train_count + data.val_count + data.test_count;
            let all = synth_shapes(total, image_size, data.data_seed)?;
            Ok(Splits::from_ordered(all, data.train_count, data.val_count))
        }
    }
}
