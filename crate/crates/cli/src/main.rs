mod commands;
mod svg;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use commands::Failure;

#[derive(Parser, Debug)]
#[command(name = "gridcascade", version, about = "Simulate, learn and evaluate power-grid failure cascades")]
pub struct Cli {
    /// Grid file: native JSON or a MATPOWER `.m` case.
    #[arg(long, global = true)]
    pub grid: Option<PathBuf>,

    /// Seed for every random choice the command makes.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,

    /// Output file or directory, depending on the command.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,

    /// Worker threads; defaults to all cores for gen-pool and 1 elsewhere.
    #[arg(long, global = true)]
    pub workers: Option<usize>,

    /// Emit log records as JSON lines on stderr.
    #[arg(long, global = true)]
    pub json_logs: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Parse a grid, fill unset capacities and write native JSON.
    Parse,
    /// Run one cascade and print `{"f":[...],"T":n}`.
    Simulate(SimulateArgs),
    /// Generate a cascade pool.
    GenPool(GenPoolArgs),
    /// Split a pool into train and test files.
    Split(SplitArgs),
    /// Train the graph neural network.
    TrainGnn(TrainGnnArgs),
    /// Fit the influence-model baseline on a single-α pool.
    TrainInfluence(TrainInfluenceArgs),
    /// Evaluate a model on a test pool and write metric CSVs.
    Eval(EvalArgs),
    /// Time CFS, influence and GNN prediction per 1000 samples.
    Bench(BenchArgs),
    /// Render a metric CSV as an SVG line plot.
    Plot(PlotArgs),
}

#[derive(Args, Debug)]
pub struct SimulateArgs {
    /// Comma-separated indices of the initially failed branches.
    #[arg(long, value_delimiter = ',')]
    pub fail: Vec<usize>,
    /// Load scaling applied to every default injection.
    #[arg(long, default_value_t = 1.0)]
    pub alpha: f64,
}

#[derive(Args, Debug)]
pub struct GenPoolArgs {
    /// Number of samples.
    #[arg(long, short = 'm')]
    pub samples: usize,
    #[arg(long, default_value_t = 1.0)]
    pub alpha_min: f64,
    #[arg(long, default_value_t = 2.0)]
    pub alpha_max: f64,
    /// Branches in each initial contingency.
    #[arg(long, default_value_t = 2)]
    pub outages: usize,
    /// Gzip the output.
    #[arg(long)]
    pub compress: bool,
}

#[derive(Args, Debug)]
pub struct SplitArgs {
    #[arg(long)]
    pub pool: PathBuf,
    #[arg(long, default_value_t = 0.9)]
    pub train_fraction: f64,
    #[arg(long)]
    pub compress: bool,
}

#[derive(Args, Debug)]
pub struct TrainGnnArgs {
    #[arg(long)]
    pub pool: PathBuf,
    /// Hidden width L.
    #[arg(long, default_value_t = 16)]
    pub hidden: usize,
    /// Averaging steps K.
    #[arg(long, default_value_t = 4)]
    pub steps: usize,
    /// Cascade horizon T; defaults to the longest cascade in the pool.
    #[arg(long)]
    pub horizon: Option<u32>,
    #[arg(long, default_value_t = 40)]
    pub epochs: usize,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 3e-3)]
    pub lr: f64,
    #[arg(long, value_enum, default_value_t = RuleArg::Literal)]
    pub neighbor_rule: RuleArg,
    #[arg(long, value_enum, default_value_t = DegreeArg::Full)]
    pub degree_count: DegreeArg,
    /// Loss-curve CSV; defaults to the checkpoint path with `.loss.csv`.
    #[arg(long)]
    pub loss_csv: Option<PathBuf>,
}

#[derive(clap::ValueEnum, Clone, Copy, Debug)]
pub enum RuleArg {
    Literal,
    Undirected,
}

#[derive(clap::ValueEnum, Clone, Copy, Debug)]
pub enum DegreeArg {
    Full,
    Active,
}

#[derive(Args, Debug)]
pub struct TrainInfluenceArgs {
    /// Pool generated at a single load scaling.
    #[arg(long)]
    pub pool: PathBuf,
    #[arg(long, default_value_t = gridcascade::influence::DEFAULT_RIDGE)]
    pub ridge: f64,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Test pool.
    #[arg(long)]
    pub pool: PathBuf,
    /// Training pool, used for branch failure frequencies; defaults to the
    /// test pool.
    #[arg(long)]
    pub train_pool: Option<PathBuf>,
    /// GNN checkpoint.
    #[arg(long, conflicts_with_all = ["influence", "oracle"])]
    pub checkpoint: Option<PathBuf>,
    /// Influence-model parameters.
    #[arg(long, conflicts_with = "oracle")]
    pub influence: Option<PathBuf>,
    /// Use the ground truth as the prediction.
    #[arg(long)]
    pub oracle: bool,
    /// Only evaluate samples with α in `LO,HI`.
    #[arg(long, value_delimiter = ',')]
    pub alpha_range: Option<Vec<f64>>,
    /// Accept an influence model fitted at a load scaling outside the
    /// evaluated α range.
    #[arg(long)]
    pub force: bool,
    #[arg(long, default_value_t = 21)]
    pub alpha_bins: usize,
    /// Also write SVG plots next to the CSVs.
    #[arg(long)]
    pub plots: bool,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    #[arg(long)]
    pub pool: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub influence: PathBuf,
    /// Samples to time from the start of the pool.
    #[arg(long, default_value_t = 1000)]
    pub samples: usize,
}

#[derive(Args, Debug)]
pub struct PlotArgs {
    /// CSV written by `eval`.
    #[arg(long)]
    pub csv: PathBuf,
    #[arg(long)]
    pub title: Option<String>,
}

fn init_logging(json: bool) {
    let filter = tracing_subscriber::EnvFilter::try_from_default_env()
        .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("info"));
    let builder = tracing_subscriber::fmt().with_env_filter(filter).with_writer(std::io::stderr);
    if json {
        builder.json().init();
    } else {
        builder.without_time().with_target(false).init();
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    init_logging(cli.json_logs);
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure { code, error }) => {
            eprintln!("error: {error:#}");
            ExitCode::from(code)
        }
    }
}
