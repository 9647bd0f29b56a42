//! Run configuration and its flat `key = value` text form.
//!
//! The text form is one assignment per line with `#` comments. Every key
//! listed in [`KEYS`] can also be given on the command line as `--key value`.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::{Error, Result};

/// Normalization applied after a convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormKind {
    Instance,
    Batch,
    None,
}

/// Parameter initialization for convolution kernels. Biases start at zero.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InitScheme {
    /// Zero-mean normal with standard deviation `init_std`.
    Normal,
    /// Unit-variance normal, ignoring `init_std`.
    UnitNormal,
}

/// Which scale pairs contribute to the multi-scale L1 term.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum L1Scales {
    /// Full-resolution output only.
    One,
    /// Full resolution plus the finest decoder tap.
    Two,
    /// Full resolution plus every decoder tap.
    Four,
}

impl L1Scales {
    /// Number of decoder taps (finest first) added to the full-resolution pair.
    pub fn decoder_taps(self, scales: usize) -> usize {
        match self {
            L1Scales::One => 0,
            L1Scales::Two => 1.min(scales),
            L1Scales::Four => scales,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    /// Generator taps judged by the encoder and decoder discriminators.
    Msgdd,
    /// One full-resolution discriminator on (input, output) pairs, full-resolution L1.
    Pix2PixLike,
    /// Full-resolution L1 only.
    UnetOnly,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AugmentPolicy {
    None,
    Flips,
    FlipsAffine,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Number of scales `L`.
    pub scales: usize,
    pub base_channels: usize,
    pub input_channels: usize,
    pub output_channels: usize,
    /// Side length of the square network input.
    pub image_size: usize,
    pub generator_norm: NormKind,
    pub discriminator_norm: NormKind,
    /// Instance-normalize the 1x1 tap projections before tanh.
    pub tap_norm: bool,
    pub init: InitScheme,
    pub init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            scales: 4,
            base_channels: 64,
            input_channels: 1,
            output_channels: 1,
            image_size: 256,
            generator_norm: NormKind::Instance,
            discriminator_norm: NormKind::Batch,
            tap_norm: true,
            init: InitScheme::Normal,
            init_std: 0.02,
        }
    }
}

/// Width multiplier cap of the channel schedule.
pub const MAX_WIDTH_MULTIPLIER: usize = 8;

impl ModelConfig {
    /// Channel width at depth `level` (0-based): `base * min(2^level, 8)`.
    pub fn channels_at(&self, level: usize) -> usize {
        let mult = 1usize << level.min(MAX_WIDTH_MULTIPLIER.trailing_zeros() as usize);
        self.base_channels * mult
    }

    pub fn weight_std(&self) -> f64 {
        match self.init {
            InitScheme::Normal => self.init_std,
            InitScheme::UnitNormal => 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// `None` means "pick from the image size" during validation.
    pub batch_size: Option<usize>,
    pub epochs: usize,
    /// Global gradient-norm clipping threshold; off when `None`.
    pub clip: Option<f64>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.0002,
            beta1: 0.5,
            beta2: 0.999,
            batch_size: Some(8),
            epochs: 100,
            clip: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    /// Dataset directory with `images/` and `masks/`; synthetic data when `None`.
    pub root: Option<PathBuf>,
    pub train_count: usize,
    pub val_count: usize,
    pub test_count: usize,
    /// Seed of the synthetic generator (independent of the training seed).
    pub data_seed: u64,
    pub augment: AugmentPolicy,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            root: None,
            train_count: 699,
            val_count: 100,
            test_count: 200,
            data_seed: 1,
            augment: AugmentPolicy::Flips,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub optimizer: OptimizerConfig,
    pub data: DataConfig,
    pub variant: Variant,
    pub l1_scales: L1Scales,
    pub lambda_l1: f64,
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Dump a tap grid image every this many epochs; 0 disables it.
    pub tap_grid_every: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            optimizer: OptimizerConfig::default(),
            data: DataConfig::default(),
            variant: Variant::Msgdd,
            l1_scales: L1Scales::Four,
            lambda_l1: 100.0,
            seed: 13,
            output_dir: PathBuf::from("runs/default"),
            tap_grid_every: 0,
        }
    }
}

impl RunConfig {
    /// Single-CPU preset: 64x64 synthetic ellipses, 250/50/50 split, 30 epochs.
    pub fn desk() -> Self {
        let mut config = Self::default();
        config.model.image_size = 64;
        config.model.base_channels = 8;
        config.optimizer.batch_size = Some(16);
        config.optimizer.epochs = 30;
        config.data.train_count = 250;
        config.data.val_count = 50;
        config.data.test_count = 50;
        config.output_dir = PathBuf::from("runs/desk");
        config
    }

    /// Smallest configuration with every structural feature: 8x8 input, two scales.
    pub fn micro() -> Self {
        let mut config = Self::default();
        config.model.image_size = 8;
        config.model.scales = 2;
        config.model.base_channels = 2;
        config.model.init = InitScheme::UnitNormal;
        config.optimizer.batch_size = Some(2);
        config.optimizer.epochs = 1;
        config.data.train_count = 4;
        config.data.val_count = 2;
        config.data.test_count = 2;
        config.output_dir = PathBuf::from("runs/micro");
        config
    }

    pub fn batch_size(&self) -> usize {
        self.optimizer
            .batch_size
            .unwrap_or_else(|| default_batch_size(self.model.image_size))
    }

    /// Check every constraint and fill derived defaults.
    pub fn validate(mut self) -> Result<RunConfig> {
        let mut errors = Vec::new();
        let m = &self.model;
        if m.scales < 1 {
            errors.push("scales must be ≥ 1".to_string());
        }
        if m.base_channels < 1 {
            errors.push("base_channels must be ≥ 1".to_string());
        }
        if m.input_channels < 1 || m.output_channels < 1 {
            errors.push("input_channels and output_channels must be ≥ 1".to_string());
        } else if m.input_channels != m.output_channels {
            // the bottleneck tap is compared with both input and target pyramids
            errors.push(format!(
                "input_channels ({}) and output_channels ({}) must match",
                m.input_channels, m.output_channels
            ));
        }
        if m.scales >= 1 && m.scales < 30 {
            let factor = 1usize << m.scales;
            if !m.image_size.is_multiple_of(factor) {
                errors.push(format!(
                    "image_size {} is not divisible by 2^{} = {}",
                    m.image_size, m.scales, factor
                ));
            } else if !m.image_size.is_power_of_two() {
                errors.push(format!("image_size {} is not a power of two", m.image_size));
            } else if m.image_size < 2 * factor {
                errors.push(format!(
                    "image_size {} leaves no room for the discriminator head; need ≥ 2^{} = {}",
                    m.image_size,
                    m.scales + 1,
                    2 * factor
                ));
            }
        } else if m.scales >= 30 {
            errors.push(format!("scales {} is unreasonably deep", m.scales));
        }
        if !(m.init_std > 0.0 && m.init_std.is_finite()) {
            errors.push("init_std must be > 0".to_string());
        }
        let o = &self.optimizer;
        if !(o.learning_rate > 0.0 && o.learning_rate.is_finite()) {
            errors.push(format!("learning_rate must be > 0, got {}", o.learning_rate));
        }
        for (name, beta) in [("beta1", o.beta1), ("beta2", o.beta2)] {
            if !(0.0..1.0).contains(&beta) {
                errors.push(format!("{name} must lie in [0, 1), got {beta}"));
            }
        }
        if o.epochs < 1 {
            errors.push("epochs must be ≥ 1".to_string());
        }
        if o.batch_size == Some(0) {
            errors.push("batch_size must be ≥ 1".to_string());
        }
        if let Some(clip) = o.clip {
            if clip.is_nan() || clip <= 0.0 {
                errors.push("clip must be > 0 (omit it to disable clipping)".to_string());
            }
        }
        if !(self.lambda_l1 > 0.0 && self.lambda_l1.is_finite()) {
            errors.push(format!("lambda_l1 must be > 0, got {}", self.lambda_l1));
        }
        let d = &self.data;
        if d.train_count < 1 || d.val_count < 1 || d.test_count < 1 {
            errors.push("train_count, val_count and test_count must each be ≥ 1".to_string());
        }
        if !errors.is_empty() {
            return Err(Error::Config(errors));
        }
        if self.optimizer.batch_size.is_none() {
            self.optimizer.batch_size = Some(default_batch_size(self.model.image_size));
        }
        Ok(self)
    }

    /// Apply one `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        let bad = |what: &str| Error::Config(vec![format!("{key}: expected {what}, got '{value}'")]);
        macro_rules! num {
            ($t:ty) => {
                value.parse::<$t>().map_err(|_| bad(stringify!($t)))?
            };
        }
        match key {
            "scales" => self.model.scales = num!(usize),
            "base_channels" => self.model.base_channels = num!(usize),
            "input_channels" => self.model.input_channels = num!(usize),
            "output_channels" => self.model.output_channels = num!(usize),
            "image_size" => self.model.image_size = num!(usize),
            "generator_norm" => self.model.generator_norm = value.parse().map_err(|_| bad("instance|batch|none"))?,
            "discriminator_norm" => {
                self.model.discriminator_norm = value.parse().map_err(|_| bad("instance|batch|none"))?
            }
            "tap_norm" => self.model.tap_norm = parse_bool(value).ok_or_else(|| bad("true|false"))?,
            "init" => self.model.init = value.parse().map_err(|_| bad("normal|unit-normal"))?,
            "init_std" => self.model.init_std = num!(f64),
            "learning_rate" => self.optimizer.learning_rate = num!(f64),
            "beta1" => self.optimizer.beta1 = num!(f64),
            "beta2" => self.optimizer.beta2 = num!(f64),
            "batch_size" => self.optimizer.batch_size = if value == "auto" { None } else { Some(num!(usize)) },
            "epochs" => self.optimizer.epochs = num!(usize),
            "clip" => self.optimizer.clip = if value == "off" { None } else { Some(num!(f64)) },
            "variant" => self.variant = value.parse().map_err(|_| bad("msgdd|pix2pix_like|unet_only"))?,
            "kl1" => self.l1_scales = value.parse().map_err(|_| bad("1|2|4"))?,
            "lambda_l1" => self.lambda_l1 = num!(f64),
            "data_root" => {
                self.data.root = if value.is_empty() || value == "synthetic" {
                    None
                } else {
                    Some(PathBuf::from(value))
                }
            }
            "train_count" => self.data.train_count = num!(usize),
            "val_count" => self.data.val_count = num!(usize),
            "test_count" => self.data.test_count = num!(usize),
            "data_seed" => self.data.data_seed = num!(u64),
            "augment" => self.data.augment = value.parse().map_err(|_| bad("none|flips|flips+affine"))?,
            "seed" => self.seed = num!(u64),
            "output_dir" => self.output_dir = PathBuf::from(value),
            "tap_grid_every" => self.tap_grid_every = num!(usize),
            _ => return Err(Error::Config(vec![format!("unknown key '{key}'")])),
        }
        Ok(())
    }

    /// Parse the text form on top of the defaults.
    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut config = RunConfig::default();
        config.merge_text(text)?;
        Ok(config)
    }

    /// Apply the assignments in `text` on top of `self`.
    pub fn merge_text(&mut self, text: &str) -> Result<()> {
        let mut errors = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(pos) => &raw[..pos],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                errors.push(format!("line {}: expected 'key = value'", lineno + 1));
                continue;
            };
            if let Err(Error::Config(mut e)) = self.set(key.trim(), value) {
                errors.append(&mut e);
            }
        }
        if errors.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errors))
        }
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(Error::io(format!("reading config {}", path.display())))?;
        Self::parse(&text)
    }

    /// Canonical text form; `parse(to_text())` reproduces `self`.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let o = &self.optimizer;
        let d = &self.data;
        let mut out = String::new();
        let mut put = |k: &str, v: String| {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(&v);
            out.push('\n');
        };
        put("scales", m.scales.to_string());
        put("base_channels", m.base_channels.to_string());
        put("input_channels", m.input_channels.to_string());
        put("output_channels", m.output_channels.to_string());
        put("image_size", m.image_size.to_string());
        put("generator_norm", m.generator_norm.to_string());
        put("discriminator_norm", m.discriminator_norm.to_string());
        put("tap_norm", m.tap_norm.to_string());
        put("init", m.init.to_string());
        put("init_std", fmt_f64(m.init_std));
        put("learning_rate", fmt_f64(o.learning_rate));
        put("beta1", fmt_f64(o.beta1));
        put("beta2", fmt_f64(o.beta2));
        put("batch_size", o.batch_size.map_or("auto".to_string(), |b| b.to_string()));
        put("epochs", o.epochs.to_string());
        put("clip", o.clip.map_or("off".to_string(), fmt_f64));
        put("variant", self.variant.to_string());
        put("kl1", self.l1_scales.to_string());
        put("lambda_l1", fmt_f64(self.lambda_l1));
        put(
            "data_root",
            d.root
                .as_ref()
                .map_or("synthetic".to_string(), |p| p.display().to_string()),
        );
        put("train_count", d.train_count.to_string());
        put("val_count", d.val_count.to_string());
        put("test_count", d.test_count.to_string());
        put("data_seed", d.data_seed.to_string());
        put("augment", d.augment.to_string());
        put("seed", self.seed.to_string());
        put("output_dir", self.output_dir.display().to_string());
        put("tap_grid_every", self.tap_grid_every.to_string());
        out
    }
}

/// Every configuration key, in canonical order.
pub const KEYS: &[&str] = &[
    "scales",
    "base_channels",
    "input_channels",
    "output_channels",
    "image_size",
    "generator_norm",
    "discriminator_norm",
    "tap_norm",
    "init",
    "init_std",
    "learning_rate",
    "beta1",
    "beta2",
    "batch_size",
    "epochs",
    "clip",
    "variant",
    "kl1",
    "lambda_l1",
    "data_root",
    "train_count",
    "val_count",
    "test_count",
    "data_seed",
    "augment",
    "seed",
    "output_dir",
    "tap_grid_every",
];

fn default_batch_size(image_size: usize) -> usize {
    if image_size <= 64 {
        16
    } else {
        8
    }
}

fn fmt_f64(v: f64) -> String {
    // `{:?}` is the shortest round-trip representation and keeps a decimal point.
    format!("{v:?}")
}

fn parse_bool(s: &str) -> Option<bool> {
    match s {
        "true" | "on" | "yes" | "1" => Some(true),
        "false" | "off" | "no" | "0" => Some(false),
        _ => None,
    }
}

macro_rules! text_enum {
    ($ty:ty { $($variant:path => $text:literal $(| $alias:literal)*),+ $(,)? }) => {
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $($variant => $text),+ })
            }
        }
        impl FromStr for $ty {
            type Err = ();
            fn from_str(s: &str) -> std::result::Result<Self, ()> {
                match s {
                    $($text $(| $alias)* => Ok($variant),)+
                    _ => Err(()),
                }
            }
        }
    };
}

text_enum!(NormKind {
    NormKind::Instance => "instance",
    NormKind::Batch => "batch",
    NormKind::None => "none",
});
text_enum!(InitScheme {
    InitScheme::Normal => "normal",
    InitScheme::UnitNormal => "unit-normal",
});
text_enum!(L1Scales {
    L1Scales::One => "1" | "1l1",
    L1Scales::Two => "2" | "2l1",
    L1Scales::Four => "4" | "4l1",
});
text_enum!(Variant {
    Variant::Msgdd => "msgdd",
    Variant::Pix2PixLike => "pix2pix_like",
    Variant::UnetOnly => "unet_only",
});
text_enum!(AugmentPolicy {
    AugmentPolicy::None => "none",
    AugmentPolicy::Flips => "flips",
    AugmentPolicy::FlipsAffine => "flips+affine",
});

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn messages(err: Error) -> Vec<String> {
        match err {
            Error::Config(m) => m,
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn default_config_is_accepted_unchanged() {
        let config = RunConfig::default();
        assert_eq!(config.optimizer.learning_rate, 0.0002);
        assert_eq!(config.model.scales, 4);
        assert_eq!(config.model.image_size, 256);
        assert_eq!(config.clone().validate().unwrap(), config);
    }

    #[test]
    fn zero_scales_is_rejected() {
        let mut config = RunConfig::default();
        config.model.scales = 0;
        let msgs = messages(config.validate().unwrap_err());
        assert!(msgs.iter().any(|m| m == "scales must be ≥ 1"), "{msgs:?}");
    }

    #[test]
    fn indivisible_size_is_rejected() {
        let mut config = RunConfig::default();
        config.model.image_size = 100;
        // 100 / 16 = 6 remainder 4
        assert_ne!(100 % 16, 0);
        let msgs = messages(config.validate().unwrap_err());
        assert!(
            msgs.iter().any(|m| m.contains("100 is not divisible by 2^4")),
            "{msgs:?}"
        );
    }

    #[test]
    fn non_positive_rates_and_unknown_kl1_are_rejected() {
        let mut config = RunConfig::default();
        config.optimizer.learning_rate = -0.1;
        let msgs = messages(config.validate().unwrap_err());
        assert!(msgs[0].contains("learning_rate"));
        let err = RunConfig::parse("kl1 = 3").unwrap_err();
        assert!(err.to_string().contains("kl1"));
    }

    #[test]
    fn auto_batch_size_follows_resolution() {
        let mut config = RunConfig::default();
        config.optimizer.batch_size = None;
        assert_eq!(config.clone().validate().unwrap().batch_size(), 8);
        config.model.image_size = 64;
        assert_eq!(config.validate().unwrap().optimizer.batch_size, Some(16));
    }

    #[test]
    fn parse_handles_comments_and_reports_every_bad_line() {
        let text = "# header\nseed = 7  # trailing\n\nbogus = 1\nepochs = x\nnot an assignment\n";
        let msgs = messages(RunConfig::parse(text).unwrap_err());
        assert_eq!(msgs.len(), 3, "{msgs:?}");
        let ok = RunConfig::parse("seed = 7 # c\ninit = unit-normal\ntap_norm = false").unwrap();
        assert_eq!(ok.seed, 7);
        assert_eq!(ok.model.init, InitScheme::UnitNormal);
        assert!(!ok.model.tap_norm);
    }

    #[test]
    fn every_key_is_serialized() {
        let text = RunConfig::default().to_text();
        let keys: Vec<&str> = text.lines().map(|l| l.split_once(" = ").unwrap().0).collect();
        assert_eq!(keys, KEYS);
    }

    #[test]
    fn channel_schedule_is_capped() {
        let m = ModelConfig {
            base_channels: 3,
            ..ModelConfig::default()
        };
        let widths: Vec<usize> = (0..6).map(|l| m.channels_at(l)).collect();
        assert_eq!(widths, vec![3, 6, 12, 24, 24, 24]);
    }

    fn arb_config() -> impl Strategy<Value = RunConfig> {
        (
            1usize..6,
            1usize..128,
            prop_oneof![Just(NormKind::Instance), Just(NormKind::Batch), Just(NormKind::None)],
            any::<bool>(),
            1e-6f64..1.0,
            proptest::option::of(1usize..64),
            proptest::option::of(0.01f64..10.0),
            prop_oneof![
                Just(Variant::Msgdd),
                Just(Variant::Pix2PixLike),
                Just(Variant::UnetOnly)
            ],
            prop_oneof![Just(L1Scales::One), Just(L1Scales::Two), Just(L1Scales::Four)],
            (0.5f64..500.0, any::<u64>(), proptest::option::of("[a-z]{1,8}")),
        )
            .prop_map(
                |(scales, base, norm, tap_norm, lr, batch, clip, variant, kl1, (lambda, seed, root))| {
                    let mut c = RunConfig::default();
                    c.model.scales = scales;
                    c.model.base_channels = base;
                    c.model.discriminator_norm = norm;
                    c.model.tap_norm = tap_norm;
                    c.optimizer.learning_rate = lr;
                    c.optimizer.batch_size = batch;
                    c.optimizer.clip = clip;
                    c.variant = variant;
                    c.l1_scales = kl1;
                    c.lambda_l1 = lambda;
                    c.seed = seed;
                    c.data.root = root.map(PathBuf::from);
                    c
                },
            )
    }

    proptest! {
        #[test]
        fn text_round_trip_is_identity(config in arb_config()) {
            let parsed = RunConfig::parse(&config.to_text()).unwrap();
            prop_assert_eq!(parsed, config);
        }
    }
}
