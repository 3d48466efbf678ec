//! `alignmamba`: generate synthetic data, train, evaluate, sweep alignment
//! weights and benchmark fusion kernels.
//!
//! Exit codes: 0 on success, 1 when a run or an `--assert` check fails,
//! 2 for usage, config and input errors.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use alignmamba::bench::KernelKind;
use alignmamba::mem::CountingAllocator;
use clap::{Parser, Subcommand, ValueEnum};
use thiserror::Error;

#[global_allocator]
static ALLOC: CountingAllocator = CountingAllocator;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad flags, config or input files.
    #[error("{0}")]
    Usage(String),
    /// The command ran but did not succeed.
    #[error("{0}")]
    Failed(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Failed(_) => 1,
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "alignmamba",
    version,
    about = "Multimodal state-space fusion with OT and MMD alignment"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SweepParam {
    #[value(name = "lambda_ot")]
    LambdaOt,
    #[value(name = "lambda_mmd")]
    LambdaMmd,
}

impl SweepParam {
    pub fn name(self) -> &'static str {
        match self {
            SweepParam::LambdaOt => "lambda_ot",
            SweepParam::LambdaMmd => "lambda_mmd",
        }
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset from the `data` section of a config.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Replace the contents of a non-empty output directory.
        #[arg(long)]
        force: bool,
    },
    /// Train a model; writes a checkpoint and `metrics.csv` to `--out`.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Accuracy and F1 of a checkpoint on one split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test", value_parser = ["train", "val", "test"])]
        split: String,
    },
    /// Train once per grid value and seed; writes median validation
    /// accuracy and F1 per value.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum)]
        param: SweepParam,
        #[arg(long, num_args = 1.., required = true)]
        grid: Vec<f64>,
        /// Seeds for model init and training; defaults to three seeds
        /// starting at `train.seed`.
        #[arg(long, num_args = 1..)]
        seeds: Vec<u64>,
        /// Dataset directory; generated from the config when absent.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Time and measure fusion kernels across sequence lengths.
    Bench {
        #[arg(long, num_args = 1.., value_parser = parse_kernel)]
        kernels: Vec<KernelKind>,
        /// Ascending lengths; defaults to 1024 2048 4096 8192 16384.
        #[arg(long, num_args = 1..)]
        lengths: Vec<usize>,
        #[arg(long, default_value_t = 10)]
        trials: usize,
        #[arg(long, default_value_t = 128)]
        d_model: usize,
        /// Allocation cap per forward pass in MiB; 0 disables it.
        #[arg(long, default_value_t = 1024)]
        mem_budget_mib: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        csv: Option<PathBuf>,
        #[arg(long)]
        svg: Option<PathBuf>,
        /// Check the scaling trends and exit 1 if any fails.
        #[arg(long = "assert")]
        check: bool,
        /// Override the growth a kernel is checked against, e.g.
        /// `attention_fusion=linear`.
        #[arg(long = "tag", value_parser = parse_tag)]
        tags: Vec<(KernelKind, alignmamba::bench::Growth)>,
    },
}

fn parse_kernel(s: &str) -> Result<KernelKind, String> {
    s.parse()
        .map_err(|e: alignmamba::bench::BenchError| e.to_string())
}

fn parse_tag(s: &str) -> Result<(KernelKind, alignmamba::bench::Growth), String> {
    use alignmamba::bench::Growth;
    let (k, g) = s
        .split_once('=')
        .ok_or_else(|| format!("expected KERNEL=GROWTH, got {s:?}"))?;
    let growth = match g {
        "linear" => Growth::Linear,
        "quadratic" => Growth::Quadratic,
        _ => return Err(format!("growth must be linear or quadratic, got {g:?}")),
    };
    Ok((parse_kernel(k)?, growth))
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenData { config, out, force } => commands::gen_data(&config, &out, force),
        Command::Train {
            config,
            data,
            out,
            force,
        } => commands::train(&config, &data, &out, force),
        Command::Eval {
            checkpoint,
            data,
            split,
        } => commands::eval(&checkpoint, &data, &split),
        Command::Sweep {
            config,
            param,
            grid,
            seeds,
            data,
            out,
            force,
        } => commands::sweep(&commands::SweepArgs {
            config,
            param,
            grid,
            seeds,
            data,
            out,
            force,
        }),
        Command::Bench {
            kernels,
            lengths,
            trials,
            d_model,
            mem_budget_mib,
            seed,
            csv,
            svg,
            check,
            tags,
        } => commands::bench(&commands::BenchArgs {
            kernels,
            lengths,
            trials,
            d_model,
            mem_budget_mib,
            seed,
            csv,
            svg,
            check,
            tags,
        }),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
