//! `msc`: command-line harness for the multi-scale causal attention toolkit.

mod commands;

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "msc", version, about = "Multi-scale causal video diffusion toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Closed-form and enumerated attention FLOP counts.
    Flops(FlopsArgs),
    /// Dense attention mask of one branch geometry, as a PBM bitmap.
    Mask(MaskArgs),
    /// Analytic gradients against central finite differences.
    Gradcheck(GradcheckArgs),
    /// Train the denoiser on synthetic clips.
    Train(TrainArgs),
    /// Autoregressive frame-by-frame sampling.
    Sample(SampleArgs),
    /// Pooled-noise variance and SNR gain experiment.
    Snr(SnrArgs),
    /// Frame-causality perturbation audit with a non-causal control.
    Audit(AuditArgs),
    /// Write a synthetic moving-square clip.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
struct FlopsArgs {
    /// Cost inputs as JSON, or `defaults`.
    #[arg(long, default_value = "defaults")]
    config: String,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct MaskArgs {
    /// Geometry as JSON; overrides the geometry flags.
    #[arg(long)]
    config: Option<String>,
    /// Token grid as `TxHxW`.
    #[arg(long, default_value = "2x1x1")]
    grid: String,
    #[arg(long, value_enum, default_value = "low")]
    branch: Branch,
    /// High-res spatial window.
    #[arg(long, default_value_t = 3)]
    window: usize,
    /// High-res temporal window in frames.
    #[arg(long, default_value_t = 2)]
    frames: usize,
    /// Low-res temporal stride.
    #[arg(long, default_value_t = 1)]
    stride: usize,
    #[arg(long)]
    non_causal: bool,
    /// Largest mask side to materialize.
    #[arg(long, default_value_t = 4096)]
    cap: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
enum Branch {
    High,
    Low,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    #[arg(long)]
    seed: u64,
    /// Number of consecutive seeds starting at `--seed`.
    #[arg(long, default_value_t = 10)]
    seeds: u64,
    #[arg(long, default_value_t = msc::gradcheck::DEFAULT_EPS)]
    eps: f64,
    #[arg(long, default_value_t = msc::gradcheck::DEFAULT_TOLERANCE)]
    tol: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Run config as JSON, or `defaults` for the desk configuration.
    #[arg(long, default_value = "defaults")]
    config: String,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    /// Checkpoint directory to continue from.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Stop after this many total steps (the run config keeps its length).
    #[arg(long)]
    stop_at: Option<u64>,
    /// Record wall-clock time per step; makes metrics non-reproducible.
    #[arg(long)]
    timing: bool,
}

#[derive(Debug, Args)]
struct SampleArgs {
    /// Run or model config as JSON, or `defaults`; ignored for the model
    /// when `--checkpoint` is given.
    #[arg(long, default_value = "defaults")]
    config: String,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Latent frames to produce; defaults to the model's frame count.
    #[arg(long)]
    frames: Option<usize>,
    /// Video directory of clean frames to continue from.
    #[arg(long)]
    context: Option<PathBuf>,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct SnrArgs {
    #[arg(long, value_delimiter = ',', default_value = "0.5,1,2")]
    sigmas: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "1,2,4")]
    rs: Vec<usize>,
    #[arg(long, default_value_t = 100_000)]
    trials: usize,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct AuditArgs {
    /// Run or model config as JSON, or `defaults`.
    #[arg(long, default_value = "defaults")]
    config: String,
    #[arg(long, default_value_t = 20)]
    trials: usize,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// Clip shape as `TxHxWxC`.
    #[arg(long, default_value = "8x16x16x4")]
    shape: String,
    #[arg(long, default_value_t = 4)]
    square: usize,
    /// Square velocity as `rows,cols` per frame.
    #[arg(long, default_value = "1,0", allow_hyphen_values = true)]
    velocity: String,
    /// Background pan velocity as `rows,cols` per frame.
    #[arg(long, default_value = "0,1", allow_hyphen_values = true)]
    pan: String,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Flops(a) => commands::flops(a),
        Command::Mask(a) => commands::mask(a),
        Command::Gradcheck(a) => commands::gradcheck(a),
        Command::Train(a) => commands::train(a),
        Command::Sample(a) => commands::sample(a),
        Command::Snr(a) => commands::snr(a),
        Command::Audit(a) => commands::audit(a),
        Command::Synth(a) => commands::synth(a),
    };
    match result {
        Ok(outcome) => {
            // A closed stdout (e.g. piped into `head`) is not a failure.
            let _ = writeln!(std::io::stdout().lock(), "{}", outcome.summary);
            if outcome.pass {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if commands::is_usage_error(&e) { 2 } else { 1 })
        }
    }
}
