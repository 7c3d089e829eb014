use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use tracing_subscriber::EnvFilter;

mod commands;

#[derive(Debug, Parser)]
#[command(
    name = "limnoplan",
    version,
    about = "How much monitoring data does a Secchi depth forecast need?"
)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// Long-format monitoring CSV; repeat for several files.
    #[arg(long, global = true)]
    pub input: Vec<PathBuf>,
    /// Extra cell value meaning "missing" (the empty cell always does).
    #[arg(long = "na-token", global = true, default_value = "NA")]
    pub na_tokens: Vec<String>,
    /// Length of the held-out test block in years.
    #[arg(long, global = true, default_value_t = 5)]
    pub test_years: u32,
    /// Relative slack over the full-data reference nMAE.
    #[arg(long, global = true, default_value_t = 0.05)]
    pub tolerance: f64,
    /// Ridge penalty on standardized features.
    #[arg(long, global = true, default_value_t = 1.0)]
    pub lambda: f64,
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// Directory that relative output paths are resolved against.
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,
    /// Reuse fitted stages across runs.
    #[arg(long, global = true)]
    pub cache_dir: Option<PathBuf>,
    /// Keep chlorophyll covariates and SDD-to-bottom records.
    #[arg(long, global = true)]
    pub no_exclusions: bool,
    /// Repeat for more log output.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Switch {
    On,
    Off,
}

#[derive(Debug, Args, Clone)]
pub struct GridArgs {
    /// Smallest training size (default: number of features + 2).
    #[arg(long)]
    pub n_min: Option<usize>,
    #[arg(long, default_value_t = 1)]
    pub stride: usize,
}

#[derive(Debug, Args, Clone)]
pub struct JointArgs {
    #[arg(long, default_value_t = 200)]
    pub trees: usize,
    #[command(flatten)]
    pub grid: GridArgs,
    /// Leave fallback lakes out of the cross-lake medians.
    #[arg(long)]
    pub exclude_fallback: bool,
    /// Search prefixes of the cross-lake ranking instead of each lake's own.
    #[arg(long)]
    pub global_ranking: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Parse input files and summarize lakes and rejected rows.
    Ingest {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Lake-level operations.
    Lakes {
        #[command(subcommand)]
        command: LakesCommand,
    },
    /// Fill one lake's covariate gaps by chained equations.
    Impute {
        #[arg(long)]
        lake: u32,
        #[arg(long, default_value_t = 10)]
        sweeps: usize,
        #[arg(long, value_enum, default_value_t = Switch::Off)]
        noise: Switch,
        /// Completed matrix as CSV.
        #[arg(long)]
        out: PathBuf,
        /// Fit report as JSON (stdout when omitted).
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// nMAE against training-history length and the minimal sample count.
    SampleCurve {
        #[arg(long)]
        lake: u32,
        #[command(flatten)]
        grid: GridArgs,
        /// `n,nmae` rows.
        #[arg(long)]
        out: Option<PathBuf>,
        /// JSON with n_star and reference_nmae (default: next to --out).
        #[arg(long)]
        sidecar: Option<PathBuf>,
    },
    /// Rank one lake's covariates by forest impurity importance.
    FeatureRank {
        #[arg(long)]
        lake: u32,
        #[arg(long, default_value_t = 200)]
        trees: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Smallest ranked prefix within tolerance of the full feature set.
    FeatureSelect {
        #[arg(long)]
        lake: u32,
        #[arg(long, default_value_t = 200)]
        trees: usize,
        /// `k,nmae` rows.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        sidecar: Option<PathBuf>,
    },
    /// Minimal (n, k) per lake and the cross-lake summary.
    Joint {
        /// Lake list from `lakes rank`; all lakes when omitted.
        #[arg(long)]
        lakes: Option<PathBuf>,
        #[command(flatten)]
        args: JointArgs,
        #[arg(long)]
        out: Option<PathBuf>,
        /// `midas,n,k,nmae,feasible` rows for every lake.
        #[arg(long)]
        emit_grid: Option<PathBuf>,
    },
    /// Generate a synthetic lake (or several) from a JSON config.
    Synth {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        truth: Option<PathBuf>,
    },
    /// Run every stage on every lake and write the report bundle.
    Report {
        #[command(flatten)]
        args: JointArgs,
        /// Keep only the lakes with the lowest mean missingness.
        #[arg(long)]
        top: Option<usize>,
    },
}

#[derive(Debug, Subcommand)]
pub enum LakesCommand {
    /// Order lakes by mean covariate missingness.
    Rank {
        #[arg(long)]
        top: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.global.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    tracing_subscriber::fmt()
        .with_env_filter(
            EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new(level)),
        )
        .with_writer(std::io::stderr)
        .init();
    match commands::run(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {:#}", e.source);
            ExitCode::from(e.code)
        }
    }
}
