//! Segmentation metrics, variant comparisons and gradient diagnostics.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::Rng as _;

use crate::config::{DataConfig, L1Scales, RunConfig, Variant};
use crate::data::{load_splits, synth_shapes, PairedSample};
use crate::generator::Generator;
use crate::nn::{EntryKind, ParamId};
use crate::raster::ImageTensor;
use crate::rng::{derived_rng, Stream};
use crate::trainer::{
    self, dis_tensors, discriminator_graph, generator_forward, generator_graph, Batch, GraphOptions, Networks,
    TrainState,
};
use crate::{Error, Result};

/// Pixel F1 (Dice) of `pred > threshold` against `gt > 0`.
///
/// Two empty masks score 1 and exactly one empty mask scores 0.
pub fn f1_score(pred: &ImageTensor, gt: &ImageTensor, threshold: f64) -> Result<f64> {
    if pred.shape() != gt.shape() {
        return Err(Error::Shape(format!(
            "prediction {:?} and ground truth {:?} differ in shape",
            pred.shape(),
            gt.shape()
        )));
    }
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for (p, g) in pred.values().iter().zip(gt.values()) {
        match (*p > threshold, *g > 0.0) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    let pred_empty = tp + fp == 0;
    let gt_empty = tp + fn_ == 0;
    Ok(match (pred_empty, gt_empty) {
        (true, true) => 1.0,
        (true, false) | (false, true) => 0.0,
        _ => 2.0 * tp as f64 / (2 * tp + fp + fn_) as f64,
    })
}

/// Per-image F1 of the generator's evaluation-mode outputs at threshold 0.
pub fn per_image_f1(generator: &Generator, samples: &[PairedSample], batch_size: usize) -> Result<Vec<f64>> {
    let mut scores = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch_size.max(1)) {
        let inputs: Vec<&ImageTensor> = chunk.iter().map(|s| &s.input).collect();
        let out = generator.predict(&ImageTensor::batch(&inputs)?)?;
        for (i, s) in chunk.iter().enumerate() {
            scores.push(f1_score(&ImageTensor::from_batch(&out, i)?, &s.target, 0.0)?);
        }
    }
    Ok(scores)
}

/// Mean per-image F1; 0 for an empty sample list.
pub fn mean_f1(generator: &Generator, samples: &[PairedSample], batch_size: usize) -> Result<f64> {
    let scores = per_image_f1(generator, samples, batch_size)?;
    Ok(mean(&scores))
}

fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        0.0
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitName {
    Train,
    Val,
    Test,
}

impl fmt::Display for SplitName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SplitName::Train => "train",
            SplitName::Val => "val",
            SplitName::Test => "test",
        })
    }
}

impl FromStr for SplitName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(SplitName::Train),
            "val" => Ok(SplitName::Val),
            "test" => Ok(SplitName::Test),
            other => Err(Error::Value(format!("unknown split {other:?} (train, val, test)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub ids: Vec<String>,
    pub per_image: Vec<f64>,
    pub mean_f1: f64,
    pub threshold: f64,
    pub split: SplitName,
    pub checkpoint_id: String,
}

impl MetricReport {
    pub fn new(ids: Vec<String>, per_image: Vec<f64>, split: SplitName, checkpoint_id: String) -> Self {
        Self {
            mean_f1: mean(&per_image),
            ids,
            per_image,
            threshold: 0.0,
            split,
            checkpoint_id,
        }
    }

    pub fn summary(&self) -> String {
        format!(
            "split={} images={} mean_f1={} threshold={} checkpoint={}",
            self.split,
            self.per_image.len(),
            self.mean_f1,
            self.threshold,
            self.checkpoint_id
        )
    }

    /// Per-image CSV (`id,f1`) and the summary line next to it.
    pub fn write(&self, csv_path: &Path) -> Result<PathBuf> {
        if let Some(dir) = csv_path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(Error::io(format!("creating {}", dir.display())))?;
        }
        let mut w = csv::Writer::from_path(csv_path)?;
        w.write_record(["id", "f1"])?;
        for (id, f1) in self.ids.iter().zip(&self.per_image) {
            w.write_record([id.clone(), f1.to_string()])?;
        }
        w.flush()
            .map_err(Error::io(format!("writing {}", csv_path.display())))?;
        let summary_path = csv_path.with_extension("txt");
        fs::write(&summary_path, self.summary() + "\n")
            .map_err(Error::io(format!("writing {}", summary_path.display())))?;
        Ok(summary_path)
    }
}

/// Evaluate a generator on samples.
pub fn evaluate_generator(
    generator: &Generator,
    samples: &[PairedSample],
    split: SplitName,
    checkpoint_id: String,
) -> Result<MetricReport> {
    let batch = if generator.model().image_size <= 64 { 16 } else { 4 };
    let per_image = per_image_f1(generator, samples, batch)?;
    let ids = samples.iter().map(|s| s.id.clone()).collect();
    Ok(MetricReport::new(ids, per_image, split, checkpoint_id))
}

/// Evaluate a checkpoint on one split of its dataset, or of `data` if given.
pub fn evaluate(checkpoint: &Path, split: SplitName, data: Option<&DataConfig>) -> Result<MetricReport> {
    let state = TrainState::load(checkpoint, None)?;
    let data = data.unwrap_or(&state.config.data);
    let splits = load_splits(data, state.config.model.image_size)?;
    let samples = match split {
        SplitName::Train => &splits.train,
        SplitName::Val => &splits.val,
        SplitName::Test => &splits.test,
    };
    let fingerprint = state.nets.generator.params.fingerprint();
    let id = format!("{}@epoch{}#{}", checkpoint.display(), state.epoch, &fingerprint[..12]);
    evaluate_generator(&state.nets.generator, samples, split, id)
}

/// A named comparison arm.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AblationSpec {
    Msgdd(L1Scales),
    Pix2PixLike,
    UnetOnly,
}

impl AblationSpec {
    pub fn name(self) -> &'static str {
        match self {
            AblationSpec::Msgdd(L1Scales::Four) => "msgdd_4l1",
            AblationSpec::Msgdd(L1Scales::Two) => "msgdd_2l1",
            AblationSpec::Msgdd(L1Scales::One) => "msgdd_1l1",
            AblationSpec::Pix2PixLike => "pix2pix_like",
            AblationSpec::UnetOnly => "unet_only",
        }
    }

    /// The base configuration with this arm's switches applied.
    pub fn apply(self, base: &RunConfig) -> RunConfig {
        let mut config = base.clone();
        match self {
            AblationSpec::Msgdd(scales) => {
                config.variant = Variant::Msgdd;
                config.l1_scales = scales;
            }
            AblationSpec::Pix2PixLike => {
                config.variant = Variant::Pix2PixLike;
                config.l1_scales = L1Scales::One;
            }
            AblationSpec::UnetOnly => {
                config.variant = Variant::UnetOnly;
                config.l1_scales = L1Scales::One;
            }
        }
        config.output_dir = base.output_dir.join(self.name());
        config
    }

    /// Parse a comma-separated list such as `msgdd_4l1,pix2pix_like,unet_only`.
    pub fn parse_list(text: &str) -> Result<Vec<Self>> {
        text.split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(str::parse)
            .collect()
    }

    pub const KL1: [AblationSpec; 3] = [
        AblationSpec::Msgdd(L1Scales::One),
        AblationSpec::Msgdd(L1Scales::Two),
        AblationSpec::Msgdd(L1Scales::Four),
    ];

    pub const BASELINES: [AblationSpec; 3] = [
        AblationSpec::Msgdd(L1Scales::Four),
        AblationSpec::Pix2PixLike,
        AblationSpec::UnetOnly,
    ];
}

impl FromStr for AblationSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.to_ascii_lowercase().as_str() {
            "msgdd_4l1" | "4l1" | "msgdd" => AblationSpec::Msgdd(L1Scales::Four),
            "msgdd_2l1" | "2l1" => AblationSpec::Msgdd(L1Scales::Two),
            "msgdd_1l1" | "1l1" => AblationSpec::Msgdd(L1Scales::One),
            "pix2pix_like" | "pix2pix" => AblationSpec::Pix2PixLike,
            "unet_only" | "unet" => AblationSpec::UnetOnly,
            other => {
                return Err(Error::Value(format!(
                    "unknown variant {other:?} (msgdd_4l1, msgdd_2l1, msgdd_1l1, pix2pix_like, unet_only)"
                )))
            }
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub variant: String,
    pub mean_f1: f64,
    pub best_val_f1: f64,
    pub best_epoch: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub const HEADER: [&'static str; 4] = ["variant", "mean_f1", "best_val_f1", "best_epoch"];

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(Error::io(format!("creating {}", dir.display())))?;
        }
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(Self::HEADER)?;
        for r in &self.rows {
            w.write_record([
                r.variant.clone(),
                r.mean_f1.to_string(),
                r.best_val_f1.to_string(),
                r.best_epoch.to_string(),
            ])?;
        }
        w.flush().map_err(Error::io(format!("writing {}", path.display())))
    }

    /// Fixed-width text table with F1 in percent.
    pub fn to_text(&self) -> String {
        let width = self.rows.iter().map(|r| r.variant.len()).max().unwrap_or(7).max(7);
        let mut out = format!("{:<width$}  F1 (%)\n", "variant");
        for r in &self.rows {
            out += &format!("{:<width$}  {:.2}\n", r.variant, 100.0 * r.mean_f1);
        }
        out
    }
}

/// Train every arm with the same seed, data and epoch budget, then score the
/// best-validation checkpoint of each on the test split.
pub fn run_ablation(base: &RunConfig, specs: &[AblationSpec]) -> Result<AblationTable> {
    if specs.is_empty() {
        return Err(Error::Value("ablation needs at least one variant".into()));
    }
    let mut rows = Vec::with_capacity(specs.len());
    for spec in specs {
        let config = spec.apply(base);
        log::info!("ablation arm {}", spec.name());
        let result = trainer::train(&config, None)?;
        let report = evaluate(&result.best_checkpoint, SplitName::Test, Some(&config.data))?;
        report.write(&config.output_dir.join("test_report.csv"))?;
        rows.push(AblationRow {
            variant: spec.name().to_string(),
            mean_f1: report.mean_f1,
            best_val_f1: result.best_val_f1,
            best_epoch: result.best_epoch,
        });
    }
    let table = AblationTable { rows };
    table.write_csv(&base.output_dir.join("ablation.csv"))?;
    Ok(table)
}

/// Gradient norm of one generator block, with and without tap inputs to the
/// discriminators.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockNorm {
    pub block: String,
    pub norm: f64,
    pub norm_taps_ablated: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradProbeReport {
    pub lambda_l1: f64,
    pub blocks: Vec<BlockNorm>,
}

impl GradProbeReport {
    pub fn get(&self, block: &str) -> Option<&BlockNorm> {
        self.blocks.iter().find(|b| b.block == block)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(Error::io(format!("creating {}", dir.display())))?;
        }
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["block", "grad_norm", "grad_norm_taps_ablated"])?;
        for b in &self.blocks {
            w.write_record([b.block.clone(), b.norm.to_string(), b.norm_taps_ablated.to_string()])?;
        }
        w.flush().map_err(Error::io(format!("writing {}", path.display())))
    }
}

fn block_norms(nets: &Networks, batch: &Batch, opts: GraphOptions) -> Vec<(String, f64)> {
    let g = &nets.generator;
    let graph = generator_graph(nets, batch, opts);
    let mut grads = graph.tape.backward(graph.total);
    let names = g.block_names();
    let mut sq = vec![0.0; names.len()];
    for (id, var) in graph.bound.params() {
        let block = Generator::block_of(&g.params.entries()[id.index()].name);
        let k = names.iter().position(|n| *n == block).expect("known block");
        if let Some(t) = grads.take(var) {
            sq[k] += t.squared_norm();
        }
    }
    names.into_iter().zip(sq.into_iter().map(f64::sqrt)).collect()
}

/// Per-block gradient norms of the generator objective with L1 weight
/// `lambda_l1` (0 probes the adversarial term alone).
pub fn grad_probe(nets: &Networks, batch: &Batch, config: &RunConfig, lambda_l1: f64) -> GradProbeReport {
    let opts = GraphOptions {
        lambda_l1,
        ..GraphOptions::for_config(config)
    };
    let full = block_norms(nets, batch, opts);
    let ablated = block_norms(
        nets,
        batch,
        GraphOptions {
            ablate_taps: true,
            ..opts
        },
    );
    GradProbeReport {
        lambda_l1,
        blocks: full
            .into_iter()
            .zip(ablated)
            .map(|((block, norm), (_, norm_taps_ablated))| BlockNorm {
                block,
                norm,
                norm_taps_ablated,
            })
            .collect(),
    }
}

/// Result of [`finite_diff_check`].
#[derive(Clone, Debug, PartialEq)]
pub struct FiniteDiffReport {
    pub step: f64,
    /// Max relative error over generator parameters of the generator objective.
    pub generator_max_rel_error: f64,
    /// Max relative error over discriminator parameters of the combined
    /// discriminator objective.
    pub discriminator_max_rel_error: f64,
    pub generator_checked: usize,
    pub discriminator_checked: usize,
    /// Samples skipped because a ReLU or |x| changed branch within ±step.
    pub rejected: usize,
}

impl FiniteDiffReport {
    pub fn max_rel_error(&self) -> f64 {
        self.generator_max_rel_error.max(self.discriminator_max_rel_error)
    }
}

/// Scalar objective plus the branch pattern of its graph.
type Objective<'a> = dyn Fn(&Networks) -> (f64, Vec<bool>) + 'a;

fn scalar_params(nets: &Networks, stores: &[usize]) -> Vec<(usize, ParamId, usize)> {
    let all = nets.stores();
    let mut out = Vec::new();
    for &s in stores {
        let store = all[s].1;
        for id in store.ids() {
            let e = &store.entries()[id.index()];
            if e.kind == EntryKind::Param {
                out.extend((0..e.value.len()).map(|k| (s, id, k)));
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn check_objective(
    nets: &Networks,
    objective: &Objective,
    analytic: &[Vec<Option<msgdd_tensor::Tensor>>],
    stores: &[usize],
    n_params: usize,
    step: f64,
    seed: u64,
    rejected: &mut usize,
) -> (f64, usize) {
    let candidates = scalar_params(nets, stores);
    let (_, base_pattern) = objective(nets);
    let mut rng = derived_rng(seed, Stream::Probe, stores[0] as u64);
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    let mut attempts = 0;
    while checked < n_params && attempts < 20 * n_params {
        attempts += 1;
        let (s, id, k) = candidates[rng.random_range(0..candidates.len())];
        let eval_at = |delta: f64| {
            let mut probe = nets.clone();
            probe.stores_mut()[s].1.get_mut(id).data_mut()[k] += delta;
            objective(&probe)
        };
        let (plus, plus_pattern) = eval_at(step);
        let (minus, minus_pattern) = eval_at(-step);
        if plus_pattern != base_pattern || minus_pattern != base_pattern {
            *rejected += 1;
            continue;
        }
        let numeric = (plus - minus) / (2.0 * step);
        let a = analytic[s][id.index()].as_ref().map_or(0.0, |g| g.data()[k]);
        let rel = (a - numeric).abs() / a.abs().max(1e-8);
        worst = worst.max(rel);
        checked += 1;
    }
    (worst, checked)
}

/// Central differences on `n_params` randomly sampled parameters against
/// analytic gradients, for the generator objective and the combined
/// discriminator objective. Samples whose ±step perturbation flips a ReLU or
/// |x| branch anywhere in the graph are skipped (the L1 sub-gradient at 0 is
/// taken as 0).
pub fn finite_diff_check(config: &RunConfig, n_params: usize, step: f64, seed: u64) -> Result<FiniteDiffReport> {
    if !(1e-4..=1e-2).contains(&step) {
        return Err(Error::Value(format!(
            "finite-difference step {step} outside [1e-4, 1e-2]"
        )));
    }
    let state = TrainState::new(config.clone())?;
    let config = &state.config;
    let nets = &state.nets;
    let samples = synth_shapes(config.batch_size(), config.model.image_size, config.data.data_seed)?;
    let refs: Vec<&PairedSample> = samples.iter().collect();
    let batch = Batch::new(&refs, config.model.scales)?;
    let opts = GraphOptions::for_config(config);
    let store_count = nets.stores().len();

    // generator objective
    let gen_objective = |n: &Networks| {
        let graph = generator_graph(
            n,
            &batch,
            GraphOptions {
                trainable: false,
                ..opts
            },
        );
        (graph.tape.value(graph.total).item(), graph.tape.kink_pattern())
    };
    let graph = generator_graph(nets, &batch, opts);
    let mut grads = graph.tape.backward(graph.total);
    let mut analytic: Vec<Vec<Option<msgdd_tensor::Tensor>>> =
        nets.stores().iter().map(|(_, s)| vec![None; s.len()]).collect();
    for (id, var) in graph.bound.params() {
        analytic[0][id.index()] = grads.take(var);
    }
    let mut rejected = 0;
    let (generator_max_rel_error, generator_checked) = check_objective(
        nets,
        &gen_objective,
        &analytic,
        &[0],
        n_params,
        step,
        seed,
        &mut rejected,
    );

    // discriminator objective on fixed generator outputs
    let fixed = generator_forward(
        &nets.generator,
        &batch,
        GraphOptions {
            trainable: false,
            ..opts
        },
    );
    let dis_list = |n: &Networks| -> Vec<crate::discriminator::Discriminator> {
        [n.dis_e.clone(), n.dis_d.clone()].into_iter().flatten().collect()
    };
    let dis_objective = |n: &Networks| {
        let mut total = 0.0;
        let mut pattern = Vec::new();
        let list = dis_list(n);
        for d in &list {
            let (real, fake) = dis_tensors(d, &batch, &fixed.tape, &fixed.vars);
            let g = discriminator_graph(d, real, fake);
            total += g.tape.value(g.loss).item();
            pattern.extend(g.tape.kink_pattern());
        }
        (total / list.len().max(1) as f64, pattern)
    };
    let (mut discriminator_max_rel_error, mut discriminator_checked) = (0.0, 0);
    if store_count > 1 {
        let list = dis_list(nets);
        for (j, d) in list.iter().enumerate() {
            let (real, fake) = dis_tensors(d, &batch, &fixed.tape, &fixed.vars);
            let g = discriminator_graph(d, real, fake);
            let scale = 1.0 / list.len() as f64;
            let mut dg = g.tape.backward(g.loss);
            for (id, var) in g.bound.params() {
                analytic[j + 1][id.index()] = dg.take(var).map(|t| t.map(|v| v * scale));
            }
        }
        let stores: Vec<usize> = (1..store_count).collect();
        (discriminator_max_rel_error, discriminator_checked) = check_objective(
            nets,
            &dis_objective,
            &analytic,
            &stores,
            n_params,
            step,
            seed,
            &mut rejected,
        );
    }
    Ok(FiniteDiffReport {
        step,
        generator_max_rel_error,
        discriminator_max_rel_error,
        generator_checked,
        discriminator_checked,
        rejected,
    })
}
