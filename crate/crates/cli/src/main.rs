mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dsfer_core::data::{Part, DEFAULT_DIFFICULTY};
use dsfer_core::gradcheck::Scale;
use dsfer_core::Error;

/// Bitemporal change detection: synthetic data, training, evaluation and
/// inference.
#[derive(Parser)]
#[command(name = "dsfer", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// JSON run configuration; omitted keys take desk-preset values.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Start from a named preset instead of a file (desk, tiny, full).
    #[arg(long)]
    preset: Option<String>,
    /// Dotted override applied after parsing, e.g. `loop.batch_size=4`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn given(&self) -> bool {
        self.config.is_some() || self.preset.is_some() || !self.overrides.is_empty()
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset in the A/ B/ label/ layout.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, short = 'n', default_value_t = 100)]
        count: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = DEFAULT_DIFFICULTY)]
        difficulty: f64,
    },
    /// Train and keep the checkpoint with the best validation F1.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Output directory (overrides `paths.out_dir`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a checkpoint, or saved prediction maps, on one split part.
    Eval {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, required_unless_present = "predictions")]
        checkpoint: Option<PathBuf>,
        /// Directory of `<id>.png` binary maps to score instead of a model.
        #[arg(long, conflicts_with = "checkpoint")]
        predictions: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        part: Part,
        /// Also write the metrics JSON here.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Predict one image pair and write probability, binary and (with a
    /// label) confusion maps.
    Infer {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        t1: PathBuf,
        #[arg(long)]
        t2: PathBuf,
        #[arg(long)]
        label: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare analytic gradients with central finite differences.
    Gradcheck {
        #[arg(long, default_value = "small")]
        scale: Scale,
        /// Print the report as JSON instead of a table.
        #[arg(long)]
        json: bool,
    },
    /// Export the retrieved stage-4/5 change maps of one sample.
    VizHopfield {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long = "sample")]
        sample_id: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train each decoder/retrieval variant over several seeds.
    Ablation {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Train once per dice weight λ.
    LambdaSweep {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, value_delimiter = ',', default_value = "0,0.01,0.1,1,10")]
        lambdas: Vec<f64>,
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Print a preset configuration as JSON.
    Config {
        #[arg(long, default_value = "desk")]
        preset: String,
    },
}

/// Exit status per failure category.
fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::Config(_)) | Some(Error::Json(_)) => 3,
        Some(Error::Data(_)) | Some(Error::Sample { .. }) | Some(Error::Io { .. }) | Some(Error::Image { .. }) => 4,
        Some(Error::Numeric(_)) => 5,
        Some(Error::Checkpoint(_)) => 6,
        None => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    dsfer_core::train::init_threads();
    let cli = Cli::parse();
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
