//! `dpm`: simulate cohorts, fit model variants, evaluate fits and render
//! reports.

mod commands;
mod manifest;
mod svg;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use commands::CliError;

#[derive(Parser, Debug)]
#[command(name = "dpm", version, about = "Disparity-aware disease-progression modelling")]
struct Cli {
    /// Overrides the seed in any configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for parallel chains (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate a synthetic cohort from a TOML configuration.
    Simulate(SimulateArgs),
    /// Fit a model variant to a dataset.
    Fit(FitArgs),
    /// Evaluate fits: recovery, bias, baselines, oracles or disparity.
    Evaluate(EvaluateArgs),
    /// Summarize an output directory as Markdown.
    Report(ReportArgs),
}

#[derive(Args, Debug)]
pub struct SimulateArgs {
    /// TOML file with simulation settings.
    #[arg(long)]
    pub config: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum PriorChoice {
    /// Generating priors with only the sign of the first loading pinned.
    Synthetic,
    /// The generating priors as they are.
    Simulation,
    /// Weakly informative priors.
    WeaklyInformative,
    /// Weakly informative priors with loading means from factor analysis.
    FaSeeded,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum MetricChoice {
    Diagonal,
    Dense,
    LowRank,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum InitChoice {
    DataDriven,
    Prior,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ParamChoice {
    Centered,
    NonCentered,
    CenteredInitial,
}

#[derive(Args, Debug)]
pub struct FitArgs {
    /// Dataset table.
    #[arg(long)]
    pub data: PathBuf,
    /// Model variant (full, no_initial_severity_disparity, no_rate_disparity,
    /// no_visit_disparity, no_disparities).
    #[arg(long, default_value = "full")]
    pub variant: String,
    /// TOML file with sampler settings; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub chains: Option<usize>,
    #[arg(long)]
    pub warmup: Option<usize>,
    #[arg(long)]
    pub draws: Option<usize>,
    #[arg(long)]
    pub target_accept: Option<f64>,
    #[arg(long)]
    pub max_leapfrog: Option<usize>,
    #[arg(long, value_enum)]
    pub metric: Option<MetricChoice>,
    #[arg(long, value_enum, default_value = "synthetic")]
    pub priors: PriorChoice,
    #[arg(long, value_enum, default_value = "data-driven")]
    pub init: InitChoice,
    #[arg(long, value_enum, default_value = "centered-initial")]
    pub parameterization: ParamChoice,
    /// Bin width in model time units (default: 1 / longest record).
    #[arg(long)]
    pub delta: Option<f64>,
    /// Fit only the first BINS bins of every patient.
    #[arg(long, value_name = "BINS")]
    pub truncate: Option<usize>,
    /// Exit 0 even when R̂ exceeds 1.1 on a global parameter.
    #[arg(long)]
    pub allow_nonconverged: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    Recovery,
    Bias,
    Baselines,
    Oracles,
    Disparity,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    #[arg(long, value_enum)]
    pub mode: Mode,
    /// Fit output directory; repeat for several fits.
    #[arg(long = "fit")]
    pub fits: Vec<PathBuf>,
    /// Truth sidecar; repeat once per fit in recovery mode.
    #[arg(long = "truth")]
    pub truths: Vec<PathBuf>,
    /// Dataset table (default: the one recorded by the first fit).
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Calendar years per model time unit (disparity mode).
    #[arg(long)]
    pub years_per_unit: Option<f64>,
    /// Comma-separated indices of the informative features (baselines mode).
    #[arg(long, value_delimiter = ',')]
    pub informative: Vec<usize>,
    /// Bins used for training the prediction baselines (default: half the longest record).
    #[arg(long)]
    pub train_window: Option<usize>,
    /// Top fraction of visits flagged as high risk (bias mode).
    #[arg(long, default_value_t = 0.25)]
    pub q: f64,
    /// Bootstrap replicates (disparity mode).
    #[arg(long, default_value_t = 1000)]
    pub n_boot: usize,
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    /// Directory produced by another subcommand.
    #[arg(long)]
    pub dir: PathBuf,
}

pub struct Global {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
}

fn run() -> Result<(), CliError> {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return if code == 0 { Ok(()) } else { Err(CliError::Usage(String::new())) };
        }
    };
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(format!("cannot configure {n} threads: {e}")))?;
    }
    let g = Global { seed: cli.seed, out: cli.out };
    match cli.command {
        Command::Simulate(a) => commands::simulate(&g, &a),
        Command::Fit(a) => commands::fit(&g, &a),
        Command::Evaluate(a) => commands::evaluate(&g, &a),
        Command::Report(a) => commands::report(&g, &a),
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string();
            if !msg.is_empty() {
                eprintln!("error: {msg}");
            }
            ExitCode::from(e.code())
        }
    }
}
