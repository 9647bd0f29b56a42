//! Alternating optimization: encoder discriminator, decoder discriminator,
//! then generator, once each per step.
//!
//! All per-epoch randomness (shuffling, augmentation) comes from streams
//! derived from `(seed, epoch)`, so resuming from a checkpoint written at the
//! end of epoch `e` continues exactly as an uninterrupted run would.

use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};

use msgdd_tensor::{Tape, Tensor, Var};
use rand::seq::SliceRandom;

use crate::checkpoint::Checkpoint;
use crate::config::{L1Scales, RunConfig, Variant};
use crate::data::{augment, load_splits, tensor_pyramid, PairedSample, Splits};
use crate::discriminator::{DisKind, Discriminator};
use crate::evaluation::mean_f1;
use crate::generator::{Generator, GeneratorVars};
use crate::losses::{self, LossBundle};
use crate::nn::{Bound, EntryKind, Forward, Mode, ParamId, ParamStore, StatUpdate};
use crate::optim::Adam;
use crate::raster::ImageTensor;
use crate::rng::{derived_rng, Stream};
use crate::{Error, Result};

pub const METRICS_HEADER: &str = "epoch,l_dis_e,l_dis_d,l_g_dis,l_g_l1,l_g_total,val_f1";
pub const METRICS_FILE: &str = "metrics.csv";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";

/// A training batch with its input and target pyramids.
#[derive(Clone, Debug)]
pub struct Batch {
    pub input: Tensor,
    pub target: Tensor,
    /// Input pooled 1..=L times.
    pub input_levels: Vec<Tensor>,
    /// Target pooled 1..=L times.
    pub target_levels: Vec<Tensor>,
}

impl Batch {
    pub fn new(samples: &[&PairedSample], scales: usize) -> Result<Self> {
        let inputs: Vec<&ImageTensor> = samples.iter().map(|s| &s.input).collect();
        let targets: Vec<&ImageTensor> = samples.iter().map(|s| &s.target).collect();
        let input = ImageTensor::batch(&inputs)?;
        let target = ImageTensor::batch(&targets)?;
        Ok(Self {
            input_levels: tensor_pyramid(&input, scales),
            target_levels: tensor_pyramid(&target, scales),
            input,
            target,
        })
    }

    pub fn len(&self) -> usize {
        self.input.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// The generator and whichever discriminators the variant uses.
#[derive(Clone, Debug)]
pub struct Networks {
    pub generator: Generator,
    pub dis_e: Option<Discriminator>,
    /// Decoder-side discriminator, or the pair discriminator for `pix2pix_like`.
    pub dis_d: Option<Discriminator>,
}

impl Networks {
    pub fn new(config: &RunConfig) -> Self {
        let m = &config.model;
        let generator = Generator::new(m, &mut derived_rng(config.seed, Stream::Init, 0));
        let dis = |kind, index| Discriminator::new(kind, m, &mut derived_rng(config.seed, Stream::Init, index));
        let (dis_e, dis_d) = match config.variant {
            Variant::Msgdd => (Some(dis(DisKind::Encoder, 1)), Some(dis(DisKind::Decoder, 2))),
            Variant::Pix2PixLike => (None, Some(dis(DisKind::Pair, 2))),
            Variant::UnetOnly => (None, None),
        };
        Self {
            generator,
            dis_e,
            dis_d,
        }
    }

    /// `(prefix, store)` for every network, in checkpoint order.
    pub fn stores(&self) -> Vec<(&'static str, &ParamStore)> {
        let mut out = vec![("gen", &self.generator.params)];
        if let Some(d) = &self.dis_e {
            out.push(("dis_e", &d.params));
        }
        if let Some(d) = &self.dis_d {
            out.push(("dis_d", &d.params));
        }
        out
    }

    pub(crate) fn stores_mut(&mut self) -> Vec<(&'static str, &mut ParamStore)> {
        let mut out = vec![("gen", &mut self.generator.params)];
        if let Some(d) = &mut self.dis_e {
            out.push(("dis_e", &mut d.params));
        }
        if let Some(d) = &mut self.dis_d {
            out.push(("dis_d", &mut d.params));
        }
        out
    }
}

/// L1 scale set actually used by a variant: the baselines use the
/// full-resolution term only.
pub fn effective_l1_scales(config: &RunConfig) -> L1Scales {
    match config.variant {
        Variant::Msgdd => config.l1_scales,
        Variant::Pix2PixLike | Variant::UnetOnly => L1Scales::One,
    }
}

/// Everything needed to continue training.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub config: RunConfig,
    pub nets: Networks,
    pub opt_g: Adam,
    pub opt_e: Option<Adam>,
    pub opt_d: Option<Adam>,
    /// Completed epochs.
    pub epoch: usize,
    pub best_val_f1: f64,
    pub best_epoch: usize,
}

impl TrainState {
    pub fn new(config: RunConfig) -> Result<Self> {
        let config = config.validate()?;
        let nets = Networks::new(&config);
        let opt = &config.optimizer;
        Ok(Self {
            opt_g: Adam::new(opt, &nets.generator.params),
            opt_e: nets.dis_e.as_ref().map(|d| Adam::new(opt, &d.params)),
            opt_d: nets.dis_d.as_ref().map(|d| Adam::new(opt, &d.params)),
            nets,
            config,
            epoch: 0,
            best_val_f1: -1.0,
            best_epoch: 0,
        })
    }

    fn optimizers(&self) -> Vec<(&'static str, &Adam)> {
        let mut out = vec![("gen", &self.opt_g)];
        if let Some(o) = &self.opt_e {
            out.push(("dis_e", o));
        }
        if let Some(o) = &self.opt_d {
            out.push(("dis_d", o));
        }
        out
    }

    /// Serialize every tensor, moment buffer and counter.
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new(self.config.to_text());
        for (prefix, store) in self.nets.stores() {
            for e in store.entries() {
                ck.push(format!("{prefix}/{}", e.name), e.value.clone());
            }
        }
        for ((prefix, opt), (_, store)) in self.optimizers().into_iter().zip(self.nets.stores()) {
            for (i, e) in store.entries().iter().enumerate() {
                if e.kind == EntryKind::Param {
                    ck.push(format!("adam/{prefix}/m/{}", e.name), opt.m[i].clone());
                    ck.push(format!("adam/{prefix}/v/{}", e.name), opt.v[i].clone());
                }
            }
            ck.push(format!("adam/{prefix}/step"), Tensor::scalar(opt.step as f64));
        }
        ck.push("state/epoch", Tensor::scalar(self.epoch as f64));
        ck.push("state/best_val_f1", Tensor::scalar(self.best_val_f1));
        ck.push("state/best_epoch", Tensor::scalar(self.best_epoch as f64));
        ck
    }

    /// Rebuild a state from a checkpoint. With `config` given, the
    /// checkpoint must match its architecture; otherwise the stored
    /// configuration is used.
    pub fn from_checkpoint(ck: &Checkpoint, config: Option<RunConfig>) -> Result<Self> {
        let config = match config {
            Some(c) => c,
            None => RunConfig::parse(&ck.config_text)?,
        };
        let mut state = Self::new(config)?;
        let lookup = |name: &str, expected: &Tensor| -> Result<Tensor> {
            let found = ck
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing array {name}")))?;
            if found.shape() != expected.shape() {
                return Err(Error::Shape(format!(
                    "checkpoint array {name} has shape {:?}, expected {:?}",
                    found.shape(),
                    expected.shape()
                )));
            }
            Ok(found.clone())
        };
        for (prefix, store) in state.nets.stores_mut() {
            let ids: Vec<ParamId> = store.ids().collect();
            for id in ids {
                let name = format!("{prefix}/{}", store.entries()[id.index()].name);
                let value = lookup(&name, store.get(id))?;
                *store.get_mut(id) = value;
            }
        }
        let stores: Vec<ParamStore> = state.nets.stores().into_iter().map(|(_, s)| s.clone()).collect();
        let mut opts: Vec<(&str, &mut Adam)> = vec![("gen", &mut state.opt_g)];
        if let Some(o) = &mut state.opt_e {
            opts.push(("dis_e", o));
        }
        if let Some(o) = &mut state.opt_d {
            opts.push(("dis_d", o));
        }
        for ((prefix, opt), store) in opts.into_iter().zip(&stores) {
            for (i, e) in store.entries().iter().enumerate() {
                if e.kind == EntryKind::Param {
                    opt.m[i] = lookup(&format!("adam/{prefix}/m/{}", e.name), &opt.m[i])?;
                    opt.v[i] = lookup(&format!("adam/{prefix}/v/{}", e.name), &opt.v[i])?;
                }
            }
            opt.step = ck.scalar(&format!("adam/{prefix}/step"))? as u64;
        }
        state.epoch = ck.scalar("state/epoch")? as usize;
        state.best_val_f1 = ck.scalar("state/best_val_f1")?;
        state.best_epoch = ck.scalar("state/best_epoch")? as usize;
        Ok(state)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: &Path, config: Option<RunConfig>) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?, config)
    }
}

/// Generator graph for one batch: forward pass, multi-scale L1 and (when
/// discriminators exist) the adversarial term through both of them.
pub struct GeneratorGraph {
    pub tape: Tape,
    pub bound: Bound,
    pub vars: GeneratorVars,
    pub l1: Var,
    pub adversarial: Option<Var>,
    pub total: Var,
    pub gen_updates: Vec<StatUpdate>,
    pub dis_e_updates: Vec<StatUpdate>,
    pub dis_d_updates: Vec<StatUpdate>,
}

/// How the generator's adversarial and L1 terms are assembled.
#[derive(Clone, Copy, Debug)]
pub struct GraphOptions {
    pub lambda_l1: f64,
    pub l1_scales: L1Scales,
    /// Replace tap inputs to the discriminators by zeros.
    pub ablate_taps: bool,
    /// Differentiate with respect to the generator parameters.
    pub trainable: bool,
}

impl GraphOptions {
    pub fn for_config(config: &RunConfig) -> Self {
        Self {
            lambda_l1: config.lambda_l1,
            l1_scales: effective_l1_scales(config),
            ablate_taps: false,
            trainable: true,
        }
    }
}

fn zeros_like(tape: &mut Tape, v: Var) -> Var {
    let shape = tape.value(v).shape().to_vec();
    tape.constant(Tensor::zeros(shape))
}

/// Inputs for a discriminator, as tape variables, built from the generator
/// output (`fake`) or the ground truth (`real`).
fn dis_input_vars(tape: &mut Tape, kind: DisKind, input: Var, image: Var, taps: &[Var]) -> Vec<Var> {
    match kind {
        DisKind::Decoder => std::iter::once(image).chain(taps.iter().copied()).collect(),
        DisKind::Encoder => taps.to_vec(),
        DisKind::Pair => vec![tape.concat_channels(&[input, image])],
    }
}

/// Generator graph with both terms: [`generator_forward`] followed by
/// [`attach_adversarial`].
pub fn generator_graph(nets: &Networks, batch: &Batch, opts: GraphOptions) -> GeneratorGraph {
    let mut graph = generator_forward(&nets.generator, batch, opts);
    attach_adversarial(&mut graph, nets, batch, opts);
    graph
}

/// Generator forward pass and the multi-scale L1 term; `total` is `λ·l1`
/// until [`attach_adversarial`] adds the adversarial term.
pub fn generator_forward(g: &Generator, batch: &Batch, opts: GraphOptions) -> GeneratorGraph {
    let mut tape = Tape::new();
    let bound = g.params.bind(&mut tape, opts.trainable);
    let (vars, gen_updates) = {
        let mut f = Forward::new(&mut tape, &g.params, &bound, Mode::Train);
        let x = f.tape.constant(batch.input.clone());
        let vars = g.forward(&mut f, x);
        (vars, f.stat_updates)
    };
    let gt = tape.constant(batch.target.clone());
    let gt_levels: Vec<Var> = batch.target_levels.iter().map(|t| tape.constant(t.clone())).collect();
    let l1 = losses::tape_multi_scale_l1(
        &mut tape,
        vars.output,
        &vars.decoder_taps,
        gt,
        &gt_levels,
        opts.l1_scales,
    );
    let total = losses::tape_gen_total(&mut tape, None, l1, opts.lambda_l1);
    GeneratorGraph {
        tape,
        bound,
        vars,
        l1,
        adversarial: None,
        total,
        gen_updates,
        dis_e_updates: Vec::new(),
        dis_d_updates: Vec::new(),
    }
}

/// Score the live generator outputs with the current discriminators (as
/// constants) and rebuild `total` as `λ·l1 + adversarial`.
pub fn attach_adversarial(graph: &mut GeneratorGraph, nets: &Networks, batch: &Batch, opts: GraphOptions) {
    let tape = &mut graph.tape;
    let vars = &graph.vars;
    let mut scores = Vec::new();
    let input = tape.constant(batch.input.clone());
    for (dis, updates) in [
        (&nets.dis_e, &mut graph.dis_e_updates),
        (&nets.dis_d, &mut graph.dis_d_updates),
    ] {
        let Some(dis) = dis else { continue };
        let taps: Vec<Var> = match dis.kind() {
            DisKind::Encoder => vars.encoder_taps.clone(),
            _ => vars.decoder_taps.clone(),
        };
        let taps = if opts.ablate_taps {
            taps.iter().map(|t| zeros_like(tape, *t)).collect()
        } else {
            taps
        };
        let inputs = dis_input_vars(tape, dis.kind(), input, vars.output, &taps);
        let dbound = dis.params.bind(tape, false);
        let mut f = Forward::new(tape, &dis.params, &dbound, Mode::Train);
        scores.push(dis.forward(&mut f, &inputs));
        *updates = f.stat_updates;
    }
    if !scores.is_empty() {
        let adv = losses::tape_lsgan_gen(tape, &scores);
        graph.adversarial = Some(adv);
        graph.total = losses::tape_gen_total(tape, Some(adv), graph.l1, opts.lambda_l1);
    }
}

/// Real and fake inputs of one discriminator, detached from the generator.
pub fn dis_tensors(
    dis: &Discriminator,
    batch: &Batch,
    graph_tape: &Tape,
    vars: &GeneratorVars,
) -> (Vec<Tensor>, Vec<Tensor>) {
    let value = |v: &Var| graph_tape.value(*v).clone();
    match dis.kind() {
        DisKind::Encoder => (
            batch.input_levels.clone(),
            vars.encoder_taps.iter().map(value).collect(),
        ),
        DisKind::Decoder => {
            let mut real = vec![batch.target.clone()];
            real.extend(batch.target_levels.iter().cloned());
            let mut fake = vec![value(&vars.output)];
            fake.extend(vars.decoder_taps.iter().map(value));
            (real, fake)
        }
        DisKind::Pair => {
            let pair = |b: &Tensor| concat_channels(&batch.input, b);
            (vec![pair(&batch.target)], vec![pair(graph_tape.value(vars.output))])
        }
    }
}

fn concat_channels(a: &Tensor, b: &Tensor) -> Tensor {
    let mut tape = Tape::new();
    let (va, vb) = (tape.constant(a.clone()), tape.constant(b.clone()));
    let v = tape.concat_channels(&[va, vb]);
    tape.value(v).clone()
}

/// Discriminator graph: `½·mean((D(real)−1)²) + ½·mean(D(fake)²)`.
pub struct DiscriminatorGraph {
    pub tape: Tape,
    pub bound: Bound,
    pub loss: Var,
    pub updates: Vec<StatUpdate>,
}

pub fn discriminator_graph(dis: &Discriminator, real: Vec<Tensor>, fake: Vec<Tensor>) -> DiscriminatorGraph {
    let mut tape = Tape::new();
    let bound = dis.params.bind(&mut tape, true);
    let mut updates = Vec::new();
    let mut score = |tape: &mut Tape, inputs: Vec<Tensor>| {
        let vars: Vec<Var> = inputs.into_iter().map(|t| tape.constant(t)).collect();
        let mut f = Forward::new(tape, &dis.params, &bound, Mode::Train);
        let s = dis.forward(&mut f, &vars);
        updates.extend(f.stat_updates);
        s
    };
    let r = score(&mut tape, real);
    let f = score(&mut tape, fake);
    let loss = losses::tape_lsgan_dis(&mut tape, r, f);
    DiscriminatorGraph {
        tape,
        bound,
        loss,
        updates,
    }
}

fn param_grads(tape: &Tape, bound: &Bound, root: Var) -> Vec<(ParamId, Tensor)> {
    let mut grads = tape.backward(root);
    bound
        .params()
        .filter_map(|(id, v)| grads.take(v).map(|g| (id, g)))
        .collect()
}

fn check_finite(value: f64, epoch: usize, step: usize, term: &'static str) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::NonFinite { epoch, step, term })
    }
}

fn update_discriminator(
    dis: &mut Discriminator,
    opt: &mut Adam,
    real: Vec<Tensor>,
    fake: Vec<Tensor>,
    (epoch, step, term): (usize, usize, &'static str),
) -> Result<f64> {
    let graph = discriminator_graph(dis, real, fake);
    let loss = check_finite(graph.tape.value(graph.loss).item(), epoch, step, term)?;
    let grads = param_grads(&graph.tape, &graph.bound, graph.loss);
    opt.update(&mut dis.params, &grads);
    dis.params.apply_stat_updates(&graph.updates);
    if !dis.params.all_finite() {
        return Err(Error::NonFinite { epoch, step, term });
    }
    Ok(loss)
}

/// One optimization step of every network on `batch`.
pub fn train_step(state: &mut TrainState, batch: &Batch, epoch: usize, step: usize) -> Result<LossBundle> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    state.nets.generator.check_input(batch.input.shape())?;
    let opts = GraphOptions::for_config(&state.config);

    // (1) generator forward, kept for the generator update in (4)
    let mut graph = generator_forward(&state.nets.generator, batch, opts);

    // (2) encoder discriminator on detached encoder taps
    let mut bundle = LossBundle::default();
    if let (Some(dis), Some(opt)) = (&mut state.nets.dis_e, &mut state.opt_e) {
        let (real, fake) = dis_tensors(dis, batch, &graph.tape, &graph.vars);
        bundle.l_dis_e = update_discriminator(dis, opt, real, fake, (epoch, step, "l_dis_e"))?;
    }
    // (3) decoder (or pair) discriminator on the detached output and taps
    if let (Some(dis), Some(opt)) = (&mut state.nets.dis_d, &mut state.opt_d) {
        let (real, fake) = dis_tensors(dis, batch, &graph.tape, &graph.vars);
        bundle.l_dis_d = update_discriminator(dis, opt, real, fake, (epoch, step, "l_dis_d"))?;
    }
    bundle.l_dis = match state.config.variant {
        Variant::Msgdd => losses::loss_dis_total(bundle.l_dis_e, bundle.l_dis_d),
        _ => bundle.l_dis_d,
    };

    // (4) generator: re-score the live taps with the updated discriminators
    attach_adversarial(&mut graph, &state.nets, batch, opts);
    bundle.l_g_l1 = check_finite(graph.tape.value(graph.l1).item(), epoch, step, "l_g_l1")?;
    if let Some(adv) = graph.adversarial {
        bundle.l_g_dis = check_finite(graph.tape.value(adv).item(), epoch, step, "l_g_dis")?;
    }
    bundle.l_g_total = check_finite(graph.tape.value(graph.total).item(), epoch, step, "l_g_total")?;
    let grads = param_grads(&graph.tape, &graph.bound, graph.total);
    state.opt_g.update(&mut state.nets.generator.params, &grads);
    state.nets.generator.params.apply_stat_updates(&graph.gen_updates);
    if let Some(d) = &mut state.nets.dis_e {
        d.params.apply_stat_updates(&graph.dis_e_updates);
    }
    if let Some(d) = &mut state.nets.dis_d {
        d.params.apply_stat_updates(&graph.dis_d_updates);
    }
    if !state.nets.generator.params.all_finite() {
        return Err(Error::NonFinite {
            epoch,
            step,
            term: "generator parameters",
        });
    }
    Ok(bundle)
}

/// Epoch means of the logged losses plus validation F1.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub losses: LossBundle,
    pub val_f1: f64,
}

impl EpochRecord {
    pub fn csv_row(&self) -> String {
        let l = &self.losses;
        format!(
            "{},{},{},{},{},{},{}",
            self.epoch, l.l_dis_e, l.l_dis_d, l.l_g_dis, l.l_g_l1, l.l_g_total, self.val_f1
        )
    }
}

/// Outcome of [`train`].
#[derive(Clone, Debug)]
pub struct TrainResult {
    pub records: Vec<EpochRecord>,
    pub best_val_f1: f64,
    pub best_epoch: usize,
    pub final_val_f1: f64,
    pub metrics_path: PathBuf,
    pub best_checkpoint: PathBuf,
    pub final_checkpoint: PathBuf,
    pub state: TrainState,
}

/// Train the samples of one epoch, returning epoch-mean losses.
pub fn train_epoch(state: &mut TrainState, train: &[PairedSample], epoch: usize) -> Result<LossBundle> {
    let config = &state.config;
    let seed = config.seed;
    let scales = config.model.scales;
    let batch_size = config.batch_size();
    let policy = config.data.augment;
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.shuffle(&mut derived_rng(seed, Stream::Shuffle, epoch as u64));
    let mut aug_rng = derived_rng(seed, Stream::Augment, epoch as u64);
    let mut sum = LossBundle::default();
    let mut steps = 0usize;
    for (step, chunk) in order.chunks(batch_size).enumerate() {
        let samples: Vec<PairedSample> = chunk
            .iter()
            .map(|&i| augment(&train[i], &mut aug_rng, policy))
            .collect();
        let refs: Vec<&PairedSample> = samples.iter().collect();
        let batch = Batch::new(&refs, scales)?;
        let b = train_step(state, &batch, epoch, step)?;
        sum.l_dis_e += b.l_dis_e;
        sum.l_dis_d += b.l_dis_d;
        sum.l_dis += b.l_dis;
        sum.l_g_dis += b.l_g_dis;
        sum.l_g_l1 += b.l_g_l1;
        sum.l_g_total += b.l_g_total;
        steps += 1;
    }
    let n = steps as f64;
    Ok(LossBundle {
        l_dis_e: sum.l_dis_e / n,
        l_dis_d: sum.l_dis_d / n,
        l_dis: sum.l_dis / n,
        l_g_dis: sum.l_g_dis / n,
        l_g_l1: sum.l_g_l1 / n,
        l_g_total: sum.l_g_total / n,
    })
}

/// Optional per-epoch hook, called after each epoch's record is written.
pub type EpochHook<'a> = &'a mut dyn FnMut(&TrainState, &EpochRecord, &Splits) -> Result<()>;

/// Train from scratch, or continue `resume` up to `config.optimizer.epochs`.
pub fn train(config: &RunConfig, resume: Option<&Path>) -> Result<TrainResult> {
    train_with_hook(config, resume, None)
}

pub fn train_with_hook(config: &RunConfig, resume: Option<&Path>, mut hook: Option<EpochHook>) -> Result<TrainResult> {
    let config = config.clone().validate()?;
    let mut state = match resume {
        Some(path) => {
            let mut s = TrainState::load(path, Some(config.clone()))?;
            s.config = config.clone();
            s
        }
        None => TrainState::new(config.clone())?,
    };
    let splits = load_splits(&config.data, config.model.image_size)?;
    let out = &config.output_dir;
    fs::create_dir_all(out).map_err(Error::io(format!("creating {}", out.display())))?;
    let metrics_path = out.join(METRICS_FILE);
    let best_checkpoint = out.join(BEST_CHECKPOINT);
    let final_checkpoint = out.join(FINAL_CHECKPOINT);
    let mut log = if resume.is_some() && metrics_path.exists() {
        OpenOptions::new().append(true).open(&metrics_path)
    } else {
        fs::File::create(&metrics_path).and_then(|mut f| writeln!(f, "{METRICS_HEADER}").map(|_| f))
    }
    .map_err(Error::io(format!("opening {}", metrics_path.display())))?;

    let mut records = Vec::new();
    let mut final_val_f1 = f64::NAN;
    for epoch in state.epoch + 1..=config.optimizer.epochs {
        let losses = train_epoch(&mut state, &splits.train, epoch)?;
        let val_f1 = mean_f1(&state.nets.generator, &splits.val, config.batch_size())?;
        let record = EpochRecord { epoch, losses, val_f1 };
        writeln!(log, "{}", record.csv_row()).map_err(Error::io(format!("writing {}", metrics_path.display())))?;
        log::info!(
            "epoch {epoch}: l_g_dis={:.4} l_g_l1={:.4} val_f1={val_f1:.4}",
            losses.l_g_dis,
            losses.l_g_l1
        );
        state.epoch = epoch;
        if val_f1 > state.best_val_f1 {
            state.best_val_f1 = val_f1;
            state.best_epoch = epoch;
            state.save(&best_checkpoint)?;
        }
        state.save(&final_checkpoint)?;
        if config.tap_grid_every > 0 && epoch % config.tap_grid_every == 0 {
            let shown = &splits.val[..splits.val.len().min(4)];
            let path = out.join(format!("taps_epoch{epoch:03}.png"));
            crate::plot::save_tap_grid(&state.nets.generator, shown, &path)?;
        }
        if let Some(hook) = hook.as_mut() {
            hook(&state, &record, &splits)?;
        }
        final_val_f1 = val_f1;
        records.push(record);
    }
    log.flush()
        .map_err(Error::io(format!("writing {}", metrics_path.display())))?;
    Ok(TrainResult {
        records,
        best_val_f1: state.best_val_f1,
        best_epoch: state.best_epoch,
        final_val_f1,
        metrics_path,
        best_checkpoint,
        final_checkpoint,
        state,
    })
}
