//! `mmasr`: synthetic data generation, multi-mode transducer training, context
//! sweeps and lookahead-mask inspection.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Failure classes mapped onto the process exit code.
#[derive(Debug)]
pub enum Failure {
    /// Bad flags, unparseable specs, invalid or unresolvable configuration.
    Usage(anyhow::Error),
    /// Divergence, I/O and other errors after the run started.
    Runtime(anyhow::Error),
}

pub type CmdResult<T = ()> = Result<T, Failure>;

pub trait Classify<T> {
    fn usage(self) -> CmdResult<T>;
    fn runtime(self) -> CmdResult<T>;
}

impl<T, E: Into<anyhow::Error>> Classify<T> for Result<T, E> {
    fn usage(self) -> CmdResult<T> {
        self.map_err(|e| Failure::Usage(e.into()))
    }
    fn runtime(self) -> CmdResult<T> {
        self.map_err(|e| Failure::Runtime(e.into()))
    }
}

#[derive(Parser)]
#[command(name = "mmasr", version, about = "Multi-mode streaming transducer experiments")]
struct Cli {
    #[command(subcommand)]
    command: Commands,
}

#[derive(Args, Debug, Clone)]
pub struct RunArgs {
    /// TOML run configuration; omitted sections take their defaults
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Run seed (overrides the file)
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone, Default)]
pub struct FrameArgs {
    /// Feature frame shift in milliseconds
    #[arg(long)]
    pub frame_ms: Option<f64>,
    /// Frontend downsampling factor (defaults to the model's)
    #[arg(long)]
    pub downsample: Option<usize>,
    /// Lookahead frames contributed by the frontend
    #[arg(long)]
    pub frontend_frames: Option<usize>,
}

#[derive(Subcommand)]
enum Commands {
    /// Write train/valid/test splits of the synthetic task
    GenData {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Train a model and write the log and the averaged final checkpoint
    Train {
        #[command(flatten)]
        run: RunArgs,
        /// Lookahead sampler, e.g. `tied-uniform:0:2` or `fixed:1`
        #[arg(long)]
        sampler: Option<String>,
    },
    /// Decode the test split under several context schedules
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        /// Comma-separated schedules, e.g. `fixed:0,fixed:1,full`
        #[arg(long)]
        schedules: Option<String>,
    },
    /// Print sampled schedules with their total lookahead and latency
    SampleMasks {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Sampler spec (defaults to the configured training sampler)
        #[arg(long)]
        sampler: Option<String>,
        /// Encoder layers (defaults to the configured model)
        #[arg(long)]
        layers: Option<usize>,
        /// Number of draws
        #[arg(short = 'n', long, default_value_t = 10)]
        count: usize,
        #[command(flatten)]
        frame: FrameArgs,
    },
    /// Print the algorithmic latency of one schedule
    Latency {
        /// `fixed:c`, `full` or `layers:c1/c2/...`
        schedule: String,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Encoder layers (defaults to the configured model)
        #[arg(long)]
        layers: Option<usize>,
        #[command(flatten)]
        frame: FrameArgs,
    },
}

fn run(cli: Cli) -> CmdResult {
    match cli.command {
        Commands::GenData { run } => commands::gen_data(&run),
        Commands::Train { run, sampler } => commands::train(&run, sampler.as_deref()),
        Commands::Sweep { run, schedules } => commands::sweep(&run, schedules.as_deref()),
        Commands::SampleMasks {
            config,
            seed,
            sampler,
            layers,
            count,
            frame,
        } => commands::sample_masks(config.as_deref(), seed, sampler.as_deref(), layers, count, &frame),
        Commands::Latency {
            schedule,
            config,
            layers,
            frame,
        } => commands::latency(&schedule, config.as_deref(), layers, &frame),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
