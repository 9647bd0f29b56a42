//! Command-line front end: `train`, `eval`, `ablate`, `synth`, `probe` and `plot`.
//!
//! Every config key doubles as a `--key value` flag (dashes and underscores
//! are interchangeable) that overrides the value from `--config` or
//! `--preset`. `--no-tap-norm` is shorthand for `--tap_norm false`.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::{RunConfig, KEYS};
use crate::data::{synth_shapes, write_dataset};
use crate::evaluation::{evaluate, grad_probe, run_ablation, AblationSpec, SplitName};
use crate::trainer::{self, Batch, TrainResult, TrainState};
use crate::{Error, Result};

#[derive(Debug, Parser)]
#[command(
    name = "msgdd",
    version,
    about = "Multi-scale gradient dual-discriminator cGAN for mask segmentation",
    after_help = "Any config key can be overridden with --<key> <value>, e.g. --epochs 5 --seed 2."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct ConfigSource {
    /// Config file of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Built-in starting point: default, desk or micro. A config file is applied on top.
    #[arg(long)]
    preset: Option<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a model; writes checkpoints and a metrics CSV to output_dir.
    Train {
        #[command(flatten)]
        source: ConfigSource,
        /// Continue from this checkpoint up to the configured epoch count.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score a checkpoint on a dataset split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// Per-image CSV; defaults to `<split>_report.csv` next to the checkpoint.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and compare several variants with one budget.
    Ablate {
        #[command(flatten)]
        source: ConfigSource,
        /// Comma-separated arms, e.g. msgdd_4l1,pix2pix_like,unet_only.
        #[arg(long, default_value = "msgdd_4l1,pix2pix_like,unet_only")]
        variants: String,
    },
    /// Write a synthetic ellipse dataset in the on-disk layout.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 350)]
        count: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long = "synth-seed", default_value_t = 1)]
        synth_seed: u64,
    },
    /// Per-block generator gradient norms, with and without tap inputs.
    Probe {
        #[command(flatten)]
        source: ConfigSource,
        /// Probe this checkpoint instead of a fresh initialization.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Drop the L1 term and probe the adversarial gradient alone.
        #[arg(long)]
        adversarial_only: bool,
    },
    /// Plot the generator losses of a metrics CSV.
    Plot {
        metrics: PathBuf,
        /// PNG path; defaults to `loss_curve.png` next to the CSV.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Split `--key value` config overrides out of `args`.
fn extract_overrides(args: Vec<OsString>) -> Result<(Vec<OsString>, Vec<(String, String)>)> {
    let mut rest = Vec::with_capacity(args.len());
    let mut overrides = Vec::new();
    let mut iter = args.into_iter();
    while let Some(arg) = iter.next() {
        let Some(text) = arg.to_str().and_then(|s| s.strip_prefix("--")) else {
            rest.push(arg);
            continue;
        };
        if text == "no-tap-norm" || text == "no_tap_norm" {
            overrides.push(("tap_norm".to_string(), "false".to_string()));
            continue;
        }
        let (name, inline) = match text.split_once('=') {
            Some((n, v)) => (n.replace('-', "_"), Some(v.to_string())),
            None => (text.replace('-', "_"), None),
        };
        if !KEYS.contains(&name.as_str()) {
            rest.push(arg);
            continue;
        }
        let value = match inline {
            Some(v) => v,
            None => iter
                .next()
                .and_then(|v| v.into_string().ok())
                .ok_or_else(|| Error::Config(vec![format!("--{name} needs a value")]))?,
        };
        overrides.push((name, value));
    }
    Ok((rest, overrides))
}

fn build_config(source: &ConfigSource, overrides: &[(String, String)]) -> Result<RunConfig> {
    let mut config = match source.preset.as_deref() {
        None | Some("default") => RunConfig::default(),
        Some("desk") => RunConfig::desk(),
        Some("micro") => RunConfig::micro(),
        Some(other) => {
            return Err(Error::Config(vec![format!(
                "unknown preset {other:?} (default, desk, micro)"
            )]))
        }
    };
    if let Some(path) = &source.config {
        let text = std::fs::read_to_string(path).map_err(Error::io(format!("reading {}", path.display())))?;
        config.merge_text(&text)?;
    }
    let mut errors = Vec::new();
    for (key, value) in overrides {
        if let Err(e) = config.set(key, value) {
            errors.push(e.to_string());
        }
    }
    if !errors.is_empty() {
        return Err(Error::Config(errors));
    }
    config.validate()
}

/// Human-readable outcome of a training run.
pub fn print_run_summary(config: &RunConfig, result: &Result<TrainResult>) -> String {
    let mut s = format!(
        "variant={} kl1={} seed={} epochs={}\n",
        config.variant, config.l1_scales, config.seed, config.optimizer.epochs
    );
    match result {
        Ok(r) => {
            let _ = writeln!(s, "best_val_f1={} best_epoch={}", r.best_val_f1, r.best_epoch);
            let _ = writeln!(s, "final_val_f1={}", r.final_val_f1);
            let _ = writeln!(s, "metrics={}", r.metrics_path.display());
            let _ = writeln!(s, "best_checkpoint={}", r.best_checkpoint.display());
            let _ = writeln!(s, "final_checkpoint={}", r.final_checkpoint.display());
        }
        Err(Error::NonFinite { epoch, step, term }) => {
            let _ = writeln!(s, "aborted at epoch {epoch}, step {step}: non-finite {term}");
        }
        Err(e) => {
            let _ = writeln!(s, "failed: {e}");
        }
    }
    s
}

fn default_sibling(path: &Path, name: &str) -> PathBuf {
    path.parent().map_or_else(|| PathBuf::from(name), |d| d.join(name))
}

fn require_source(source: &ConfigSource) -> Result<()> {
    if source.config.is_none() && source.preset.is_none() {
        return Err(Error::Config(vec![
            "missing --config <file> or --preset <default|desk|micro>".into(),
        ]));
    }
    Ok(())
}

/// Re-tag a bad argument value as a usage error.
fn usage(e: Error) -> Error {
    Error::Config(vec![e.to_string()])
}

fn execute(command: Command, overrides: &[(String, String)]) -> Result<String> {
    let no_overrides = |verb: &str| -> Result<()> {
        if overrides.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(vec![format!("{verb} does not take config overrides")]))
        }
    };
    match command {
        Command::Train { source, resume } => {
            require_source(&source)?;
            let config = build_config(&source, overrides)?;
            let result = trainer::train(&config, resume.as_deref());
            let summary = print_run_summary(&config, &result);
            match result {
                Ok(_) => Ok(summary),
                Err(e) => {
                    eprint!("{summary}");
                    Err(e)
                }
            }
        }
        Command::Eval { checkpoint, split, out } => {
            no_overrides("eval")?;
            let split: SplitName = split.parse().map_err(usage)?;
            let report = evaluate(&checkpoint, split, None)?;
            let out = out.unwrap_or_else(|| default_sibling(&checkpoint, &format!("{split}_report.csv")));
            report.write(&out)?;
            Ok(format!("{}\nreport={}\n", report.summary(), out.display()))
        }
        Command::Ablate { source, variants } => {
            require_source(&source)?;
            let config = build_config(&source, overrides)?;
            let specs = AblationSpec::parse_list(&variants).map_err(usage)?;
            let table = run_ablation(&config, &specs)?;
            Ok(format!(
                "{}table={}\n",
                table.to_text(),
                config.output_dir.join("ablation.csv").display()
            ))
        }
        Command::Synth {
            out,
            count,
            size,
            synth_seed,
        } => {
            no_overrides("synth")?;
            let samples = synth_shapes(count, size, synth_seed)?;
            write_dataset(&out, &samples)?;
            Ok(format!("wrote {count} pairs of {size}x{size} to {}\n", out.display()))
        }
        Command::Probe {
            source,
            checkpoint,
            adversarial_only,
        } => {
            let state = match &checkpoint {
                Some(path) => TrainState::load(path, None)?,
                None => {
                    require_source(&source)?;
                    TrainState::new(build_config(&source, overrides)?)?
                }
            };
            let config = &state.config;
            let samples = synth_shapes(config.batch_size(), config.model.image_size, config.data.data_seed)?;
            let refs: Vec<_> = samples.iter().collect();
            let batch = Batch::new(&refs, config.model.scales)?;
            let lambda = if adversarial_only { 0.0 } else { config.lambda_l1 };
            let report = grad_probe(&state.nets, &batch, config, lambda);
            let out = config.output_dir.join("grad_probe.csv");
            report.write_csv(&out)?;
            let mut s = String::from("block  grad_norm  grad_norm_taps_ablated\n");
            for b in &report.blocks {
                let _ = writeln!(s, "{}  {:e}  {:e}", b.block, b.norm, b.norm_taps_ablated);
            }
            let _ = writeln!(s, "report={}", out.display());
            Ok(s)
        }
        Command::Plot { metrics, out } => {
            no_overrides("plot")?;
            let out = out.unwrap_or_else(|| default_sibling(&metrics, "loss_curve.png"));
            crate::plot::plot_metrics(&metrics, &out)?;
            Ok(format!("plot={}\n", out.display()))
        }
    }
}

/// Run the CLI on `args` (including the program name) and return the exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString>,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let (rest, overrides) = match extract_overrides(args) {
        Ok(v) => v,
        Err(e) => {
            eprintln!("error: {e}");
            return 2;
        }
    };
    let cli = match Cli::try_parse_from(rest) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(cli.command, &overrides) {
        Ok(text) => {
            print!("{text}");
            0
        }
        Err(e @ Error::Config(_)) => {
            eprintln!("error: {e}");
            eprintln!("usage: msgdd <train|eval|ablate|synth|probe|plot> [options]; see `msgdd --help`");
            2
        }
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}
