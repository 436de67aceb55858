//! `volage`: synthesize cohorts, train, evaluate, ablate, audit parameters
//! and export Grad-CAM slices.
//!
//! Exit codes: 0 success, 2 configuration, 3 I/O, 4 shape mismatch,
//! 5 non-finite loss, 6 corrupt artifact. `VOLAGE_THREADS` caps the worker
//! pool; results do not depend on it.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use volage::{AttentionMode, Error};

#[derive(Parser, Debug)]
#[command(name = "volage", version, about = "Volumetric age regression with shared spatial attention")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic phantom cohort (raw volumes plus manifest CSV).
    Synth(SynthArgs),
    /// Train a model on a manifest; writes a checkpoint and a history CSV.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a manifest.
    Eval(EvalArgs),
    /// Evaluate a checkpoint on a cohort other than the one it was trained on.
    Crosseval(EvalArgs),
    /// Print the per-tensor parameter table and the total.
    Params(ParamsArgs),
    /// Train shared and untied attention from identical initial values and compare.
    Ablate(AblateArgs),
    /// Grad-CAM of one conv layer, written as mid-sagittal/coronal/axial PGM slices.
    Gradcam(GradcamArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Number of subjects (at least 2).
    #[arg(long, default_value_t = 200)]
    n: usize,
    /// Volume shape D,H,W.
    #[arg(long, default_value = "32,32,32", value_parser = parse_shape)]
    shape: [usize; 3],
    /// Age range LO:HI in years.
    #[arg(long, default_value = "60:86", value_parser = parse_range)]
    age_range: (f64, f64),
    /// Standard deviation of additive Gaussian noise.
    #[arg(long, default_value_t = 0.05)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Cohort name; the manifest is written as OUT/NAME.csv.
    #[arg(long, default_value = "synth")]
    name: String,
}

/// Flags that override the JSON config.
#[derive(Args, Debug, Default)]
struct Overrides {
    /// Training epochs [config default: 250].
    #[arg(long)]
    epochs: Option<usize>,
    /// Adam learning rate [config default: 0.0001].
    #[arg(long)]
    lr: Option<f64>,
    /// Mini-batch size [config default: 4].
    #[arg(long)]
    batch_size: Option<usize>,
    /// Seed for initialization, shuffling, dropout and the split [config default: 0].
    #[arg(long)]
    seed: Option<u64>,
    /// Attention mode [config default: shared].
    #[arg(long, value_parser = parse_mode)]
    attention: Option<AttentionMode>,
    /// Held-out fraction per age bin [config default: 0.2].
    #[arg(long)]
    test_fraction: Option<f64>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Manifest CSV.
    #[arg(long)]
    data: PathBuf,
    /// JSON run config [default: built-in defaults].
    #[arg(long)]
    config: Option<PathBuf>,
    /// Checkpoint output path.
    #[arg(long)]
    out: PathBuf,
    /// History CSV output path.
    #[arg(long)]
    history: PathBuf,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Checkpoint file.
    #[arg(long)]
    ckpt: PathBuf,
    /// Manifest CSV.
    #[arg(long)]
    data: PathBuf,
    /// Also write the report as JSON here [default: none].
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ParamsArgs {
    /// JSON run config [default: built-in defaults].
    #[arg(long)]
    config: Option<PathBuf>,
    /// Attention mode [config default: shared].
    #[arg(long, value_parser = parse_mode)]
    attention: Option<AttentionMode>,
}

#[derive(Args, Debug)]
struct AblateArgs {
    /// Manifest CSV.
    #[arg(long)]
    data: PathBuf,
    /// JSON run config [default: built-in defaults].
    #[arg(long)]
    config: Option<PathBuf>,
    /// Also write the report as JSON here [default: none].
    #[arg(long)]
    json: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args, Debug)]
struct GradcamArgs {
    /// Checkpoint file.
    #[arg(long)]
    ckpt: PathBuf,
    /// Volume file: .nii, or raw float32 with a .shape sidecar.
    #[arg(long)]
    volume: PathBuf,
    /// 1-based conv layer.
    #[arg(long)]
    layer: usize,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Activations to explain.
    #[arg(long, default_value = "post", value_parser = ["pre", "post"])]
    target: String,
    /// Also dump the full heatmap as d,h,w,value CSV.
    #[arg(long, default_value_t = false)]
    csv: bool,
}

fn parse_shape(s: &str) -> Result<[usize; 3], String> {
    let parts: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<Result<_, _>>()?;
    parts.try_into().map_err(|_| format!("expected D,H,W, got {s:?}"))
}

fn parse_range(s: &str) -> Result<(f64, f64), String> {
    let (lo, hi) = s.split_once(':').ok_or_else(|| format!("expected LO:HI, got {s:?}"))?;
    let num = |v: &str| v.trim().parse::<f64>().map_err(|e| format!("{v:?}: {e}"));
    Ok((num(lo)?, num(hi)?))
}

fn parse_mode(s: &str) -> Result<AttentionMode, String> {
    match s {
        "shared" => Ok(AttentionMode::Shared),
        "per_layer" | "per-layer" => Ok(AttentionMode::PerLayer),
        "none" => Ok(AttentionMode::None),
        _ => Err(format!("expected shared, per_layer or none, got {s:?}")),
    }
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) | Error::InvalidArgument(_) => 2,
        Error::Io { .. } | Error::Manifest(_) | Error::Nifti(_) => 3,
        Error::Shape(_) => 4,
        Error::NonFinite { .. } => 5,
        Error::Checkpoint(_) => 6,
        Error::StaleCache(_) => 1,
    }
}

fn init_threads() -> Result<(), Error> {
    let Ok(v) = std::env::var("VOLAGE_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("VOLAGE_THREADS must be a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(e.to_string()))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = init_threads().and_then(|()| match cli.command {
        Command::Synth(a) => commands::synth(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a, false),
        Command::Crosseval(a) => commands::eval(a, true),
        Command::Params(a) => commands::params(a),
        Command::Ablate(a) => commands::ablate(a),
        Command::Gradcam(a) => commands::gradcam(a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
