//! Command-line front end: argument types, validation and the subcommands.
//!
//! Exit codes: 0 success, 1 internal or invariant failure, 2 usage or
//! validation error.

use std::fmt;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use nmprune::metrics::DEFAULT_ALPHA;
use nmprune::shuffle::{ShuffleConfig, ShuffleMode, DEFAULT_BLOCK_SIZE};
use nmprune::stats::DEFAULT_BINS;
use nmprune::{MetricKind, PruneConfig, SparsityPattern};

mod commands;

pub use commands::{
    cmd_bench, cmd_eval, cmd_gemm_bench, cmd_inspect, cmd_pack, cmd_prune, cmd_stats, cmd_synth,
    BenchArgs, EvalArgs, GemmBenchArgs, PackArgs, SynthArgs,
};

pub const EXIT_FAILURE: u8 = 1;
pub const EXIT_USAGE: u8 = 2;

/// Largest relative error accepted between the sparse and dense masked products.
pub const GEMM_TOLERANCE: f64 = 1e-5;

#[derive(Debug, Parser)]
#[command(
    name = "nmprune",
    version,
    about = "N:M pruning with channel shuffling"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Per-channel entropy and amplitude of every layer's calibration activations.
    Stats(StatsArgs),
    /// Prunes every layer of a manifest.
    Prune(Config),
    /// Packs 2:4 pruned layers into `.espk` files.
    Pack(PackArgs),
    /// Checks packed layers against their dense masked weights.
    Eval(EvalArgs),
    /// Prints the header of an `.espt` or `.espk` file and checks its invariants.
    Inspect { path: PathBuf },
    /// Runs the four-configuration ablation on synthetic layers.
    Bench(BenchArgs),
    /// Times the reference sparse kernel against a dense product.
    GemmBench(GemmBenchArgs),
    /// Writes a synthetic model with a manifest.
    Synth(SynthArgs),
}

#[derive(Debug, Clone, Args)]
pub struct StatsArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_BINS)]
    pub bins: usize,
}

/// Pruning settings.
#[derive(Debug, Clone, Args)]
pub struct Config {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = MetricKind::ESparse)]
    pub metric: MetricKind,
    #[arg(long, default_value_t = DEFAULT_ALPHA)]
    pub alpha: f64,
    #[arg(long, default_value_t = DEFAULT_BINS)]
    pub bins: usize,
    #[arg(long, default_value_t = SparsityPattern::TWO_FOUR)]
    pub pattern: SparsityPattern,
    #[arg(long, default_value_t = ShuffleMode::Full)]
    pub shuffle: ShuffleMode,
    #[arg(long, default_value_t = DEFAULT_BLOCK_SIZE)]
    pub block_size: usize,
    /// Swap cap per block; defaults to ten times the block length.
    #[arg(long)]
    pub max_iters: Option<usize>,
    /// Unused by pruning, which is seed-free; accepted for symmetry with the fixture commands.
    #[arg(long)]
    pub seed: Option<u64>,
}

impl Config {
    pub fn new(manifest: impl Into<PathBuf>, out: impl Into<PathBuf>) -> Self {
        Config {
            manifest: manifest.into(),
            out: out.into(),
            metric: MetricKind::ESparse,
            alpha: DEFAULT_ALPHA,
            bins: DEFAULT_BINS,
            pattern: SparsityPattern::TWO_FOUR,
            shuffle: ShuffleMode::Full,
            block_size: DEFAULT_BLOCK_SIZE,
            max_iters: None,
            seed: None,
        }
    }

    pub fn prune_config(&self) -> Result<PruneConfig, CliError> {
        check_bins(self.bins)?;
        check_block_size(self.block_size, self.pattern)?;
        if !self.alpha.is_finite() || self.alpha < 0.0 {
            return Err(CliError::usage(format!(
                "alpha must be finite and >= 0, got {}",
                self.alpha
            )));
        }
        Ok(PruneConfig {
            metric: self.metric,
            alpha: self.alpha,
            bins: self.bins,
            pattern: self.pattern,
            shuffle: ShuffleConfig {
                mode: self.shuffle,
                block_size: self.block_size,
                max_iters: self.max_iters,
            },
        })
    }
}

pub(crate) fn check_bins(bins: usize) -> Result<(), CliError> {
    if bins < 2 {
        return Err(CliError::usage(format!(
            "bins must be at least 2, got {bins}"
        )));
    }
    Ok(())
}

pub(crate) fn check_block_size(
    block_size: usize,
    pattern: SparsityPattern,
) -> Result<(), CliError> {
    if block_size == 0 || !block_size.is_multiple_of(pattern.m_group()) {
        return Err(CliError::usage(format!(
            "block size {block_size} must be a positive multiple of {}",
            pattern.m_group()
        )));
    }
    Ok(())
}

/// An error together with the process exit code it maps to.
#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub error: anyhow::Error,
}

impl CliError {
    pub fn usage(msg: impl fmt::Display) -> Self {
        CliError {
            code: EXIT_USAGE,
            error: anyhow::anyhow!("{msg}"),
        }
    }

    pub fn failure(msg: impl fmt::Display) -> Self {
        CliError {
            code: EXIT_FAILURE,
            error: anyhow::anyhow!("{msg}"),
        }
    }

    pub fn context(self, ctx: impl fmt::Display + Send + Sync + 'static) -> Self {
        CliError {
            code: self.code,
            error: self.error.context(ctx),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#}", self.error)
    }
}

impl From<nmprune::Error> for CliError {
    fn from(e: nmprune::Error) -> Self {
        let code = if e.is_validation() {
            EXIT_USAGE
        } else {
            EXIT_FAILURE
        };
        CliError {
            code,
            error: e.into(),
        }
    }
}

impl From<nmprune::pruner::PruneModelError> for CliError {
    fn from(e: nmprune::pruner::PruneModelError) -> Self {
        let code = if e.source.is_validation() {
            EXIT_USAGE
        } else {
            EXIT_FAILURE
        };
        CliError {
            code,
            error: e.into(),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError {
            code: EXIT_FAILURE,
            error: e.into(),
        }
    }
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    let mut stdout = std::io::stdout().lock();
    match cli.command {
        Command::Stats(a) => cmd_stats(&a, &mut stdout),
        Command::Prune(c) => cmd_prune(&c, &mut stdout),
        Command::Pack(a) => cmd_pack(&a, &mut stdout),
        Command::Eval(a) => cmd_eval(&a, &mut stdout),
        Command::Inspect { path } => cmd_inspect(&path, &mut stdout),
        Command::Bench(a) => cmd_bench(&a, &mut stdout),
        Command::GemmBench(a) => cmd_gemm_bench(&a, &mut stdout),
        Command::Synth(a) => cmd_synth(&a, &mut stdout),
    }
}
