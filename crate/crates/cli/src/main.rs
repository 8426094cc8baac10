mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use impressions::Error;

/// Exit codes.
pub const EXIT_USAGE: u8 = 2;
pub const EXIT_CONFIG: u8 = 3;
pub const EXIT_IO: u8 = 4;
pub const EXIT_NUMERICAL: u8 = 5;

#[derive(Parser, Debug)]
#[command(name = "impressions", version, about = "Class impressions from a differentiable classifier")]
pub struct Cli {
    /// TOML config file; keys missing from it keep their defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override a config key, e.g. `--set synthesis.tv.period_k=2`. Repeatable;
    /// applied after the file and after the convenience flags.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub set: Vec<String>,
    /// Output root (`output.dir`).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Concurrent runs (`output.workers`).
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train the built-in classifier on IDX data and write weights plus the
    /// dataset mean (`<weights>.mean`).
    Train(TrainArgs),
    /// Synthesize one image per class.
    Synthesize(SynthesizeArgs),
    /// Fuse two classes grown from two seed pixels.
    Fuse(FuseArgs),
    /// Compare analytic input gradients with central differences.
    Gradcheck(GradcheckArgs),
    /// Collect run directories into a table and a montage.
    Report(ReportArgs),
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Directory with the MNIST IDX files (plain or .gz).
    #[arg(long, default_value = "data/mnist")]
    pub data: PathBuf,
    /// Weights file to write.
    #[arg(long)]
    pub weights: PathBuf,
    /// Use only the first N training images.
    #[arg(long)]
    pub limit: Option<usize>,
    /// `train.epochs`.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// `train.seed`.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    Ci,
    Pre,
    Sci,
}

impl Mode {
    fn phase_mode(self) -> &'static str {
        match self {
            Mode::Ci => "ci_baseline",
            Mode::Pre => "pre_only",
            Mode::Sci => "full_sci",
        }
    }
}

#[derive(Args, Debug)]
pub struct ModelArgs {
    /// Classifier weights written by `train`.
    #[arg(long)]
    pub weights: PathBuf,
    /// Dataset mean tensor; defaults to `<weights>.mean`.
    #[arg(long)]
    pub mean: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SynthesizeArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Target class; repeatable. Defaults to every class.
    #[arg(long = "class")]
    pub classes: Vec<usize>,
    /// `synthesis.phase_mode`.
    #[arg(long, value_enum)]
    pub mode: Option<Mode>,
    /// `synthesis.seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// `synthesis.iterations_pre` and `synthesis.iterations_post`.
    #[arg(long)]
    pub iterations: Option<usize>,
}

#[derive(Args, Debug)]
pub struct FuseArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub class_a: usize,
    #[arg(long)]
    pub class_b: usize,
    /// Seed pixel for class A as `row,col`.
    #[arg(long, value_parser = parse_coord)]
    pub seed_a: (usize, usize),
    #[arg(long, value_parser = parse_coord)]
    pub seed_b: (usize, usize),
    /// `synthesis.seed`.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Classes to check; defaults to every class.
    #[arg(long = "class")]
    pub classes: Vec<usize>,
    #[arg(long, default_value_t = 1e-3)]
    pub epsilon: f64,
    /// Sampled input elements per class.
    #[arg(long, default_value_t = 200)]
    pub samples: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
    /// Seed for the probe image and the element sample.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    /// Directory whose sub-directories are run directories.
    #[arg(long)]
    pub runs: PathBuf,
}

fn parse_coord(s: &str) -> Result<(usize, usize), String> {
    let (r, c) = s.split_once(',').ok_or_else(|| format!("expected row,col, got `{s}`"))?;
    let parse = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("`{v}`: {e}"));
    Ok((parse(r)?, parse(c)?))
}

/// Failure with an exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] Error),
    #[error("gradient check failed: max relative error {0:.3e} exceeds tolerance {1:.1e}")]
    GradCheck(f64, f64),
    #[error("{0}")]
    Usage(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::GradCheck(..) => EXIT_NUMERICAL,
            CliError::Core(e) => match e {
                Error::InvalidArgument(_) => EXIT_USAGE,
                Error::Config(_) | Error::ShapeMismatch { .. } => EXIT_CONFIG,
                Error::NonFinite(_) | Error::Divergence { .. } => EXIT_NUMERICAL,
                Error::EmptyDataset
                | Error::CorruptFile { .. }
                | Error::FingerprintMismatch { .. }
                | Error::Io { .. }
                | Error::Image { .. } => EXIT_IO,
            },
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE } else { 0 });
        }
    };
    match commands::dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
