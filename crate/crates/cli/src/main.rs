//! `dspp`: bounds, matching, grid arrangement and upsampling from the command
//! line. Results go to stdout as JSON; errors go to stderr with exit code 2
//! (input), 3 (solver failure) or 4 (infeasible constraints).

mod commands;
mod io;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::io::EnergyKind;

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn input(message: impl Into<String>) -> Self {
        Self {
            code: 2,
            message: message.into(),
        }
    }
}

impl From<dspp::Error> for CliError {
    fn from(e: dspp::Error) -> Self {
        use dspp::Error::*;
        let code = match e {
            DimensionMismatch { .. } | InvalidInput(_) | TooLarge { .. } => 2,
            NonConvergence { .. } | NonFinite(_) | ZeroLine { .. } => 3,
            InfeasibleConstraints(_) | InfeasibleMarginals { .. } => 4,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

#[derive(Parser)]
#[command(name = "dspp", version, about = "Quadratic matching over permutations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Where the energy comes from: a JSON file, or two distance matrices.
#[derive(Args, Clone)]
pub struct EnergySource {
    /// Energy JSON `{k, n, W, c, d}`.
    #[arg(long, conflicts_with_all = ["source_dist", "target_dist"])]
    pub dense_energy: Option<PathBuf>,
    /// Source distance matrix (headerless CSV).
    #[arg(long, requires = "target_dist")]
    pub source_dist: Option<PathBuf>,
    /// Target distance matrix (headerless CSV).
    #[arg(long, requires = "source_dist")]
    pub target_dist: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "gw")]
    pub energy: EnergyKind,
    /// Kernel width for `--energy gauss`.
    #[arg(long, default_value_t = 0.2)]
    pub sigma: f64,
}

#[derive(Args, Clone)]
pub struct PathOptions {
    /// Number of shift values, endpoints included.
    #[arg(long, default_value_t = 10)]
    pub samples: usize,
    /// Seed for the eigensolver start and any random phase.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Subcommand)]
enum Command {
    /// Lower bounds from the relaxations and the homotopy upper bound.
    Bounds {
        #[command(flatten)]
        source: EnergySource,
        #[command(flatten)]
        path: PathOptions,
    },
    /// Matches sources to targets.
    Match {
        #[command(flatten)]
        source: EnergySource,
        #[command(flatten)]
        path: PathOptions,
        /// Match `k` sources into the targets injectively.
        #[arg(long)]
        injective: Option<usize>,
        /// Also write the fuzzy coupling to this CSV.
        #[arg(long)]
        fuzzy: Option<PathBuf>,
        /// Pinned pairs JSON.
        #[arg(long)]
        pins: Option<PathBuf>,
    },
    /// Places items on a grid so that similar items sit close together.
    Arrange {
        /// One feature row per item.
        #[arg(long, conflicts_with = "dist", required_unless_present = "dist")]
        features: Option<PathBuf>,
        /// Item dissimilarity matrix.
        #[arg(long)]
        dist: Option<PathBuf>,
        /// Grid shape `RxC`.
        #[arg(long)]
        grid: String,
        /// Random transpositions tried after the solve.
        #[arg(long, default_value_t = 0)]
        swaps: usize,
        #[command(flatten)]
        path: PathOptions,
    },
    /// Extends a coarse matching to the fine point sets.
    Upsample {
        /// Coarse solution JSON in fine indices.
        #[arg(long)]
        coarse: PathBuf,
        #[arg(long)]
        source_dist: PathBuf,
        #[arg(long)]
        target_dist: PathBuf,
        #[arg(long, value_enum, default_value = "gw")]
        energy: EnergyKind,
        #[arg(long, default_value_t = 0.2)]
        sigma: f64,
        #[arg(long, value_enum)]
        mode: commands::UpsampleMode,
        /// Penalty on entries outside the support (limited mode).
        #[arg(long)]
        rho: Option<f64>,
        /// Fraction of targets kept per source (limited mode).
        #[arg(long, default_value_t = 0.2)]
        keep_frac: f64,
        /// Comma-separated fine sources to extend (greedy mode); defaults to
        /// every source without an anchor.
        #[arg(long)]
        queries: Option<String>,
        #[command(flatten)]
        path: PathOptions,
    },
    /// Exhaustive minimum and dense restricted spectrum for small problems.
    Oracle {
        #[command(flatten)]
        source: EnergySource,
    },
}

fn run(cli: Cli) -> Result<serde_json::Value, CliError> {
    match cli.command {
        Command::Bounds { source, path } => commands::bounds(&source, &path),
        Command::Match {
            source,
            path,
            injective,
            fuzzy,
            pins,
        } => commands::matching(&source, &path, injective, fuzzy.as_deref(), pins.as_deref()),
        Command::Arrange {
            features,
            dist,
            grid,
            swaps,
            path,
        } => commands::arrange(features.as_deref(), dist.as_deref(), &grid, swaps, &path),
        Command::Upsample {
            coarse,
            source_dist,
            target_dist,
            energy,
            sigma,
            mode,
            rho,
            keep_frac,
            queries,
            path,
        } => commands::upsample(&commands::UpsampleArgs {
            coarse,
            source_dist,
            target_dist,
            energy,
            sigma,
            mode,
            rho,
            keep_frac,
            queries,
            path,
        }),
        Command::Oracle { source } => commands::oracle(&source),
    }
}

fn main() -> ExitCode {
    let cli = Cli::try_parse().unwrap_or_else(|e| {
        let code = if e.use_stderr() { 2 } else { 0 };
        let _ = e.print();
        std::process::exit(code);
    });
    match run(cli) {
        Ok(out) => {
            println!("{}", serde_json::to_string_pretty(&out).expect("serializable output"));
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
