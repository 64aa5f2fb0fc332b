//! `sggan` drives semi-supervised self-growing GAN experiments: synthetic
//! data, staged training, growth, label inference, evaluation and sampling.

mod commands;
mod setup;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "sggan", version, about = "Semi-supervised self-growing GAN experiments")]
struct Cli {
    /// Log level filter (error, warn, info, debug, trace).
    #[arg(long, global = true, default_value = "warn")]
    log: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic pattern dataset to an SGDS file.
    GenData(GenDataArgs),
    /// Train a growth route and write metrics, checkpoints and samples.
    Train(TrainArgs),
    /// Grow a checkpointed cell into a later stage.
    Grow(GrowArgs),
    /// Run one round of threshold label inference on a checkpoint.
    InferLabels(InferArgs),
    /// Print test accuracy of a checkpointed discriminator.
    Eval(EvalArgs),
    /// Write a grid of generated images.
    Sample(SampleArgs),
    /// Train every growth route on one split and tabulate accuracy.
    Routes(RoutesArgs),
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    #[arg(long, default_value_t = 4)]
    pub classes: usize,
    #[arg(long, default_value_t = 100)]
    pub per_class: usize,
    /// Square image side in pixels.
    #[arg(long, default_value_t = 16)]
    pub size: usize,
    #[arg(long, default_value_t = 3)]
    pub channels: usize,
    /// Pixel noise standard deviation in 0..255 units.
    #[arg(long, default_value_t = 40.0)]
    pub noise: f64,
    /// Spatial correlation length of the noise in pixels.
    #[arg(long, default_value_t = 0.0)]
    pub noise_corr: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

/// Options shared by `train` and `routes`. Every flag maps onto a config
/// key; explicit flags override `--config`.
#[derive(Args, Debug, Default)]
pub struct RunOptions {
    #[arg(long)]
    pub data: PathBuf,
    /// Plain `key=value` file merged under the command-line flags.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub metric: Option<String>,
    /// `gaussian` (median bandwidth) or `linear`.
    #[arg(long)]
    pub kernel: Option<String>,
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Epochs per stage.
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub iters_per_epoch: Option<usize>,
    /// Most samples per class moved to the latent pool per inference round.
    #[arg(long)]
    pub class_cap: Option<usize>,
    #[arg(long)]
    pub noise_std: Option<f64>,
    #[arg(long)]
    pub labeled_per_class: Option<usize>,
    #[arg(long)]
    pub test_per_class: Option<usize>,
    #[arg(long)]
    pub validation_per_class: Option<usize>,
    #[arg(long)]
    pub unlabeled_cap: Option<usize>,
    /// Train the discriminator on the labeled pool only.
    #[arg(long, conflicts_with_all = ["metric", "kernel", "threshold", "class_cap"])]
    pub supervised_only: bool,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Comma-separated stages, e.g. `baby,junior,senior`.
    #[arg(long)]
    pub route: Option<String>,
    #[command(flatten)]
    pub run: RunOptions,
    #[arg(long)]
    pub out: PathBuf,
    /// Continue from a checkpoint instead of starting fresh.
    #[arg(long, conflicts_with_all = ["route", "config"])]
    pub resume: Option<PathBuf>,
    /// Store checkpoint tensors as f32.
    #[arg(long)]
    pub f32: bool,
}

#[derive(Args, Debug)]
pub struct GrowArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Dataset supplying the calibration batch.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub to: String,
    #[arg(long)]
    pub noise_std: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct InferArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long)]
    pub class_cap: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// `test` uses the checkpoint's test pool; `all` every labeled image.
    #[arg(long, default_value = "test")]
    pub pool: String,
}

#[derive(Args, Debug)]
pub struct SampleArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long, default_value_t = 16)]
    pub n: usize,
    #[arg(long)]
    pub cols: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct RoutesArgs {
    #[command(flatten)]
    pub run: RunOptions,
    #[arg(long)]
    pub out: PathBuf,
}

/// Failures split by exit code.
#[derive(Debug)]
pub enum Failure {
    /// Bad invocation or unreadable input (exit 2).
    Usage(anyhow::Error),
    /// Anything that went wrong while working (exit 1).
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

impl From<sggan_core::Error> for Failure {
    fn from(e: sggan_core::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

pub type Outcome<T = ()> = Result<T, Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    env_logger::Builder::new().parse_filters(&cli.log).format_timestamp(None).init();
    let result = match cli.command {
        Command::GenData(a) => commands::gen_data(&a),
        Command::Train(a) => commands::train(&a),
        Command::Grow(a) => commands::grow(&a),
        Command::InferLabels(a) => commands::infer_labels(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Sample(a) => commands::sample(&a),
        Command::Routes(a) => commands::routes(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            eprintln!("run `sggan --help` for usage");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
