//! `advseg`: dataset generation, training, evaluation, and the domain
//! probe, each recording a replayable `run.json`.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;

use advseg_core::eval::{evaluate, run_probe, EvalConfig, ProbeConfig};
use advseg_core::runfile;
use advseg_core::synth::{gen_dataset, SynthConfig};
use advseg_core::train::{train, TrainConfig};
use advseg_core::Error as CoreError;

const EXIT_CONFIG: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

#[derive(Parser)]
#[command(name = "advseg", version, about = "Adversarial domain adaptation for volumetric segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic two-domain dataset
    GenData(GenDataArgs),
    /// Train a segmenter, optionally with the adversarial branch
    Train(TrainArgs),
    /// Score a checkpoint on a labelled manifest
    Eval(EvalArgs),
    /// Discriminator accuracy on held-out segments (domain divergence proxy)
    Probe(ProbeArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Generator config (JSON; a previous run.json also works)
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the config's seed
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for volumes and the manifest
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Training config (JSON; a previous run.json also works)
    #[arg(long)]
    config: PathBuf,
    /// Experiment arm: source-only | uda | supervised-both
    #[arg(long)]
    mode: Option<String>,
    /// Peak adversarial weight
    #[arg(long)]
    alpha_max: Option<f64>,
    /// Tap-set override, e.g. L10 or L4,6,8,10
    #[arg(long)]
    taps: Option<String>,
    /// Total training epochs
    #[arg(long)]
    epochs: Option<usize>,
    /// Override the config's seed
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for metrics, checkpoints, run.json
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Eval config (JSON; a previous run.json also works)
    #[arg(long)]
    config: Option<PathBuf>,
    /// Checkpoint directory (overrides the config)
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Manifest with labelled cases (overrides the config)
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Output-window extent for dense inference
    #[arg(long)]
    tile_extent: Option<usize>,
    /// Output directory for the metrics CSV and run.json
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ProbeArgs {
    /// Probe config (JSON; a previous run.json also works)
    #[arg(long)]
    config: Option<PathBuf>,
    /// Checkpoint directory (overrides the config)
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Manifest holding both domains (overrides the config)
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Held-out segments to score (even, positive)
    #[arg(long)]
    n_samples: Option<usize>,
    /// Train a fresh discriminator on frozen features instead of loading
    /// the checkpoint's (required for source-only checkpoints)
    #[arg(long)]
    fresh: bool,
    /// Override the config's seed
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for run.json
    #[arg(long)]
    out: PathBuf,
}

struct Failure {
    code: u8,
    message: String,
}

/// Errors while assembling/validating a config exit 2.
fn cfg<T>(r: advseg_core::Result<T>) -> Result<T, Failure> {
    r.map_err(|e| Failure { code: EXIT_CONFIG, message: format!("{e:#}") })
}

/// Errors during execution exit 3, except validation failures surfaced
/// late, which are still config errors.
fn exec<T>(r: advseg_core::Result<T>) -> Result<T, Failure> {
    r.map_err(|e| {
        let code = match e {
            CoreError::InvalidConfig(_) | CoreError::InvalidSpec(_) => EXIT_CONFIG,
            _ => EXIT_RUNTIME,
        };
        Failure { code, message: format!("{e:#}") }
    })
}

fn usage(message: String) -> Failure {
    Failure { code: EXIT_CONFIG, message }
}

/// Load a config, refusing a run.json recorded by a different command
/// (every config type tolerates the others' fields, so this would
/// otherwise fall back to defaults silently).
fn load_command_config<T: DeserializeOwned>(path: &Path, expect: &str) -> advseg_core::Result<T> {
    if let Some(cmd) = runfile::run_command(path)? {
        if cmd != expect {
            return Err(CoreError::InvalidConfig(format!(
                "{} was recorded by `{cmd}`, not `{expect}`",
                path.display()
            )));
        }
    }
    runfile::load_config(path)
}

fn gen_data(a: GenDataArgs) -> Result<(), Failure> {
    let mut config: SynthConfig = match &a.config {
        Some(p) => cfg(load_command_config(p, "gen-data"))?,
        None => SynthConfig::default(),
    };
    if let Some(seed) = a.seed {
        config.seed = seed;
    }
    cfg(config.validate())?;
    exec(
        std::fs::create_dir_all(&a.out)
            .map_err(|e| CoreError::io(a.out.display().to_string(), e)),
    )?;
    exec(runfile::save_run(&a.out.join("run.json"), "gen-data", &config))?;
    let manifest = exec(gen_dataset(&config, &a.out))?;
    println!("{}", manifest.display());
    Ok(())
}

fn train_cmd(a: TrainArgs) -> Result<(), Failure> {
    let mut config: TrainConfig = cfg(load_command_config(&a.config, "train"))?;
    if let Some(mode) = &a.mode {
        config.mode = cfg(mode.parse())?;
    }
    if let Some(alpha) = a.alpha_max {
        config.schedule.alpha_max = alpha;
    }
    if let Some(taps) = &a.taps {
        config.taps = Some(taps.clone());
    }
    if let Some(epochs) = a.epochs {
        config.schedule.total_epochs = epochs;
    }
    if let Some(seed) = a.seed {
        config.seed = seed;
    }
    let config = cfg(config.resolve())?;
    cfg(config.validate())?;
    let out = exec(train(&config, &a.out))?;
    if let Some(last) = out.history.last() {
        println!(
            "epoch {}: L_seg {:.4}{}",
            last.epoch,
            last.l_seg,
            last.disc_acc_val
                .map(|acc| format!(", held-out domain accuracy {acc:.3}"))
                .unwrap_or_default()
        );
    }
    println!("{}", out.metrics_path.display());
    println!("{}", out.final_checkpoint.display());
    Ok(())
}

fn eval_cmd(a: EvalArgs) -> Result<(), Failure> {
    let mut config: EvalConfig = match &a.config {
        Some(p) => cfg(load_command_config(p, "eval"))?,
        None => EvalConfig::default(),
    };
    if let Some(p) = a.checkpoint {
        config.checkpoint = p;
    }
    if let Some(p) = a.manifest {
        config.manifest = p;
    }
    if let Some(t) = a.tile_extent {
        config.tile_extent = t;
    }
    if config.checkpoint.as_os_str().is_empty() {
        return Err(usage("--checkpoint (or config.checkpoint) is required".into()));
    }
    if config.manifest.as_os_str().is_empty() {
        return Err(usage("--manifest (or config.manifest) is required".into()));
    }
    let config = cfg(config.resolve())?;
    let out = exec(evaluate(&config, &a.out))?;
    println!(
        "{} cases: dsc {:.4} +/- {:.4}, recall {:.4}, precision {:.4}",
        out.per_case.len(),
        out.mean.dsc,
        out.std.dsc,
        out.mean.recall,
        out.mean.precision
    );
    println!("{}", out.csv_path.display());
    Ok(())
}

fn probe_cmd(a: ProbeArgs) -> Result<(), Failure> {
    let mut config: ProbeConfig = match &a.config {
        Some(p) => cfg(load_command_config(p, "probe"))?,
        None => ProbeConfig::default(),
    };
    if let Some(p) = a.checkpoint {
        config.checkpoint = p;
    }
    if let Some(p) = a.manifest {
        config.manifest = p;
    }
    if let Some(n) = a.n_samples {
        config.n_samples = n;
    }
    if a.fresh && config.fresh.is_none() {
        config.fresh = Some(Default::default());
    }
    if let Some(seed) = a.seed {
        config.seed = seed;
    }
    if config.checkpoint.as_os_str().is_empty() {
        return Err(usage("--checkpoint (or config.checkpoint) is required".into()));
    }
    if config.manifest.as_os_str().is_empty() {
        return Err(usage("--manifest (or config.manifest) is required".into()));
    }
    let config = cfg(config.resolve())?;
    let acc = exec(run_probe(&config, &a.out))?;
    println!("domain accuracy {:.4} over {} held-out segments", acc, config.n_samples);
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Cmd::GenData(a) => gen_data(a),
        Cmd::Train(a) => train_cmd(a),
        Cmd::Eval(a) => eval_cmd(a),
        Cmd::Probe(a) => probe_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
