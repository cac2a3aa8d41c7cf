use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, Context};
use gridcascade::gnn::{
    build_adjacency, predict_batch_with, train, DegreeCount, GnnConfig, GnnParams, NeighborRule, SampleRef,
    TrainConfig,
};
use gridcascade::grid::default_capacities;
use gridcascade::influence::{fit_influence, predict_influence, InfluenceParams};
use gridcascade::metrics::{evaluate, Binning, MetricsConfig, Outcome};
use gridcascade::par::{available_workers, Execution};
use gridcascade::pool::{generate_pool_with, split_pool, PoolConfig};
use gridcascade::{simulate_cascade, ActiveSet, DataPool, Grid, SimOptions};
use tracing::info;

use crate::{svg, BenchArgs, Cli, Command, DegreeArg, EvalArgs, GenPoolArgs, PlotArgs, RuleArg, SimulateArgs};
use crate::{SplitArgs, TrainGnnArgs, TrainInfluenceArgs};

/// Largest distance between an influence model's load scaling and an
/// evaluated sample's before `eval` refuses without `--force`.
const ALPHA_TOLERANCE: f64 = 0.05 + 1e-9;

pub struct Failure {
    pub code: u8,
    pub error: anyhow::Error,
}

impl Failure {
    fn config(error: anyhow::Error) -> Self {
        Failure { code: 2, error }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(error: anyhow::Error) -> Self {
        match error.downcast_ref::<gridcascade::Error>() {
            Some(gridcascade::Error::Empty(_) | gridcascade::Error::GridMismatch { .. }) => Failure::config(error),
            _ => Failure { code: 1, error },
        }
    }
}

impl From<gridcascade::Error> for Failure {
    fn from(error: gridcascade::Error) -> Self {
        anyhow::Error::from(error).into()
    }
}

type CmdResult<T = ()> = Result<T, Failure>;

fn config_error(msg: impl Into<String>) -> Failure {
    Failure::config(anyhow!(msg.into()))
}

fn require<'a>(value: &'a Option<PathBuf>, flag: &str) -> CmdResult<&'a Path> {
    value.as_deref().ok_or_else(|| config_error(format!("--{flag} is required")))
}

/// Loads the grid and fills unset capacities from the default injections.
fn load_grid(cli: &Cli) -> CmdResult<Grid> {
    let path = require(&cli.grid, "grid")?;
    let grid = Grid::load(path).with_context(|| format!("loading grid {}", path.display()))?;
    let base = grid.default_injections();
    Ok(default_capacities(&grid, &base)?)
}

fn load_pool(path: &Path) -> CmdResult<DataPool> {
    Ok(DataPool::read(path).with_context(|| format!("reading pool {}", path.display()))?)
}

fn check_grid_id(grid: &Grid, found: &str) -> CmdResult {
    if grid.id() != found {
        return Err(gridcascade::Error::GridMismatch { expected: grid.id().to_string(), found: found.to_string() }.into());
    }
    Ok(())
}

fn execution(workers: usize) -> Execution {
    if workers <= 1 {
        Execution::Sequential
    } else {
        Execution::default()
    }
}

fn emit(out: Option<&Path>, text: &str) -> CmdResult {
    match out {
        Some(path) => fs::write(path, text).with_context(|| format!("writing {}", path.display()))?,
        None => println!("{text}"),
    }
    Ok(())
}

pub fn run(cli: &Cli) -> CmdResult {
    if cli.workers == Some(0) {
        return Err(config_error("--workers must be at least 1"));
    }
    match &cli.command {
        Command::Parse => parse(cli),
        Command::Simulate(args) => simulate(cli, args),
        Command::GenPool(args) => {
            let workers = cli.workers.unwrap_or_else(available_workers);
            execution(workers).with_workers(workers, || gen_pool(cli, args, execution(workers)))
        }
        Command::Split(args) => split(cli, args),
        Command::TrainGnn(args) => {
            let workers = cli.workers.unwrap_or(1);
            execution(workers).with_workers(workers, || train_gnn(cli, args, execution(workers)))
        }
        Command::TrainInfluence(args) => train_influence(cli, args),
        Command::Eval(args) => {
            let workers = cli.workers.unwrap_or(1);
            execution(workers).with_workers(workers, || eval(cli, args, execution(workers)))
        }
        Command::Bench(args) => {
            let workers = cli.workers.unwrap_or(1);
            execution(workers).with_workers(workers, || bench(cli, args, execution(workers)))
        }
        Command::Plot(args) => plot(cli, args),
    }
}

fn parse(cli: &Cli) -> CmdResult {
    let grid = load_grid(cli)?;
    info!(grid = grid.id(), buses = grid.num_buses(), branches = grid.num_branches(), "parsed grid");
    emit(cli.out.as_deref(), &grid.to_json()?)
}

fn simulate(cli: &Cli, args: &SimulateArgs) -> CmdResult {
    if !(args.alpha.is_finite() && args.alpha > 0.0) {
        return Err(config_error(format!("--alpha must be positive, got {}", args.alpha)));
    }
    let grid = load_grid(cli)?;
    let s0 = ActiveSet::without(grid.num_branches(), &args.fail)?;
    let injections: Vec<f64> = grid.default_injections().iter().map(|p| args.alpha * p).collect();
    let result = simulate_cascade(&grid, &s0, &injections, SimOptions::default())?;
    emit(cli.out.as_deref(), &serde_json::to_string(&result).context("serializing result")?)
}

fn gen_pool(cli: &Cli, args: &GenPoolArgs, exec: Execution) -> CmdResult {
    let out = require(&cli.out, "out")?;
    if !(args.alpha_min > 0.0 && args.alpha_min <= args.alpha_max) {
        return Err(config_error(format!("invalid α range [{}, {}]", args.alpha_min, args.alpha_max)));
    }
    let grid = load_grid(cli)?;
    if args.outages > grid.num_branches() {
        return Err(config_error(format!("{} outages requested on {} branches", args.outages, grid.num_branches())));
    }
    let config = PoolConfig { alpha_range: (args.alpha_min, args.alpha_max), outages: args.outages, ..PoolConfig::default() };
    let start = Instant::now();
    let pool = generate_pool_with(&grid, args.samples, cli.seed, config, exec)?;
    info!(samples = pool.len(), seconds = start.elapsed().as_secs_f64(), "generated pool");
    pool.write(out, args.compress)?;
    Ok(())
}

fn split(cli: &Cli, args: &SplitArgs) -> CmdResult {
    let out = require(&cli.out, "out")?;
    if !(args.train_fraction > 0.0 && args.train_fraction < 1.0) {
        return Err(config_error(format!("--train-fraction must lie in (0, 1), got {}", args.train_fraction)));
    }
    let pool = load_pool(&args.pool)?;
    let (train, test) = split_pool(&pool, args.train_fraction, cli.seed)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let ext = if args.compress { "jsonl.gz" } else { "jsonl" };
    train.write(out.join(format!("train.{ext}")), args.compress)?;
    test.write(out.join(format!("test.{ext}")), args.compress)?;
    info!(train = train.len(), test = test.len(), "split pool");
    Ok(())
}

fn train_gnn(cli: &Cli, args: &TrainGnnArgs, exec: Execution) -> CmdResult {
    let out = require(&cli.out, "out")?;
    if args.epochs == 0 || args.batch_size == 0 || args.hidden == 0 || args.steps == 0 {
        return Err(config_error("--epochs, --batch-size, --hidden and --steps must be positive"));
    }
    if !(args.lr.is_finite() && args.lr > 0.0) {
        return Err(config_error(format!("--lr must be positive, got {}", args.lr)));
    }
    let grid = load_grid(cli)?;
    let pool = load_pool(&args.pool)?;
    if pool.is_empty() {
        return Err(gridcascade::Error::Empty("pool").into());
    }
    check_grid_id(&grid, &pool.grid_id)?;
    let neighbor_rule = match args.neighbor_rule {
        RuleArg::Literal => NeighborRule::Literal,
        RuleArg::Undirected => NeighborRule::Undirected,
    };
    let degree_count = match args.degree_count {
        DegreeArg::Full => DegreeCount::Full,
        DegreeArg::Active => DegreeCount::Active,
    };
    let config = GnnConfig {
        hidden: args.hidden,
        steps: args.steps,
        horizon: args.horizon.unwrap_or_else(|| pool.max_length()),
        neighbor_rule,
        degree_count,
        input_scale: 1.0 / grid.base_mva(),
    };
    let adj = build_adjacency(&grid, neighbor_rule);
    let mut params = GnnParams::new(&grid, &adj, config, cli.seed)?;
    let train_config = TrainConfig { epochs: args.epochs, batch_size: args.batch_size, lr: args.lr, seed: cli.seed };
    let start = Instant::now();
    let report = train(&mut params, &adj, &pool, &train_config, exec, |epoch, loss| {
        info!(epoch, loss, "epoch done");
    })?;
    info!(seconds = start.elapsed().as_secs_f64(), params = params.param_count(), "training finished");
    params.save(out)?;
    let loss_path = args.loss_csv.clone().unwrap_or_else(|| out.with_extension("loss.csv"));
    let mut csv = String::from("epoch,loss\n");
    for (epoch, loss) in report.loss_curve.iter().enumerate() {
        writeln!(csv, "{epoch},{loss}").expect("writing to a String");
    }
    fs::write(&loss_path, csv).with_context(|| format!("writing {}", loss_path.display()))?;
    Ok(())
}

fn train_influence(cli: &Cli, args: &TrainInfluenceArgs) -> CmdResult {
    let out = require(&cli.out, "out")?;
    let pool = load_pool(&args.pool)?;
    if pool.is_empty() {
        return Err(gridcascade::Error::Empty("pool").into());
    }
    if cli.grid.is_some() {
        check_grid_id(&load_grid(cli)?, &pool.grid_id)?;
    }
    let params = fit_influence(&pool.grid_id, &pool.samples, args.ridge)?;
    info!(alpha = params.alpha_tag, horizon = params.horizon, "fitted influence model");
    params.save(out)?;
    Ok(())
}

fn eval(cli: &Cli, args: &EvalArgs, exec: Execution) -> CmdResult {
    let out = require(&cli.out, "out")?;
    if args.alpha_bins == 0 {
        return Err(config_error("--alpha-bins must be positive"));
    }
    if args.alpha_range.as_ref().is_some_and(|r| r.len() != 2 || r[0] > r[1]) {
        return Err(config_error("--alpha-range takes LO,HI with LO <= HI"));
    }
    let mut test = load_pool(&args.pool)?;
    if let Some(range) = &args.alpha_range {
        test = test.filter_alpha(range[0], range[1]);
    }
    if test.is_empty() {
        return Err(gridcascade::Error::Empty("pool").into());
    }
    let freq_pool = match &args.train_pool {
        Some(path) => load_pool(path)?,
        None => test.clone(),
    };
    if freq_pool.grid_id != test.grid_id {
        return Err(gridcascade::Error::GridMismatch { expected: test.grid_id.clone(), found: freq_pool.grid_id }.into());
    }
    let freq = gridcascade::metrics::branch_failure_frequency(&freq_pool.samples)?;

    let (model_id, preds): (String, Vec<Outcome>) = if args.oracle {
        ("oracle".into(), test.samples.iter().map(Outcome::from_sample).collect())
    } else if let Some(path) = &args.checkpoint {
        let grid = load_grid(cli)?;
        check_grid_id(&grid, &test.grid_id)?;
        let (params, adj) = GnnParams::load(path, &grid)?;
        let refs: Vec<SampleRef<'_>> = test.samples.iter().map(SampleRef::from).collect();
        let steps = predict_batch_with(&params, &adj, &refs, exec)?;
        let horizon = params.config.horizon;
        ("gnn".into(), steps.into_iter().map(|s| Outcome::new(s, horizon)).collect())
    } else if let Some(path) = &args.influence {
        let params = InfluenceParams::load(path)?;
        if params.grid_id != test.grid_id {
            return Err(gridcascade::Error::GridMismatch { expected: test.grid_id.clone(), found: params.grid_id }.into());
        }
        if !args.force {
            if let Some(s) = test.samples.iter().find(|s| (s.alpha - params.alpha_tag).abs() > ALPHA_TOLERANCE) {
                return Err(config_error(format!(
                    "influence model was fitted at α={} but the pool contains α={}; restrict --alpha-range or pass --force",
                    params.alpha_tag, s.alpha
                )));
            }
        }
        let mut preds = Vec::with_capacity(test.len());
        for (i, s) in test.samples.iter().enumerate() {
            let (steps, horizon) = predict_influence(&params, &s.contingency).map_err(|e| anyhow!(e).context(format!("sample {i}")))?;
            preds.push(Outcome::new(steps, horizon));
        }
        (format!("influence@{}", params.alpha_tag), preds)
    } else {
        return Err(config_error("one of --checkpoint, --influence or --oracle is required"));
    };

    let config = MetricsConfig {
        alpha_bins: Binning::EqualWidth { lo: 1.0, hi: 2.0, bins: args.alpha_bins },
        ..MetricsConfig::default()
    };
    let pool_id = format!("{}#{}", test.grid_id, test.seed);
    let report = evaluate(&model_id, &pool_id, &preds, &test.samples, &freq, &config)?;
    let written = report.write_csvs(out)?;
    let summary = serde_json::json!({
        "model": report.model_id,
        "pool": report.pool_id,
        "samples": test.len(),
        "l_size": report.overall.size,
        "l_state": report.overall.state,
        "l_failure_step": report.overall.step,
    });
    let summary = serde_json::to_string_pretty(&summary).context("serializing summary")?;
    fs::write(out.join("summary.json"), &summary).context("writing summary.json")?;
    if args.plots {
        for csv in &written {
            write_plot(csv, None, &csv.with_extension("svg"))?;
        }
    }
    println!("{summary}");
    Ok(())
}

/// Seconds per 1000 samples of the fastest of `reps` runs of `f`.
fn time_per_1000(n: usize, reps: usize, mut f: impl FnMut() -> anyhow::Result<()>) -> anyhow::Result<f64> {
    let mut best = f64::INFINITY;
    for _ in 0..reps {
        let start = Instant::now();
        f()?;
        best = best.min(start.elapsed().as_secs_f64());
    }
    Ok(best / n as f64 * 1000.0)
}

fn bench(cli: &Cli, args: &BenchArgs, exec: Execution) -> CmdResult {
    let grid = load_grid(cli)?;
    let pool = load_pool(&args.pool)?;
    check_grid_id(&grid, &pool.grid_id)?;
    let samples = &pool.samples[..args.samples.min(pool.len())];
    if samples.is_empty() {
        return Err(gridcascade::Error::Empty("pool").into());
    }
    let (params, adj) = GnnParams::load(&args.checkpoint, &grid)?;
    let influence = InfluenceParams::load(&args.influence)?;
    check_grid_id(&grid, &influence.grid_id)?;
    let n = samples.len();
    let reps = 3;

    let cfs = time_per_1000(n, reps, || {
        for s in samples {
            std::hint::black_box(simulate_cascade(&grid, &s.contingency, &s.injections, SimOptions::default())?);
        }
        Ok(())
    })?;
    let infl = time_per_1000(n, reps, || {
        for s in samples {
            std::hint::black_box(predict_influence(&influence, &s.contingency)?);
        }
        Ok(())
    })?;
    let refs: Vec<SampleRef<'_>> = samples.iter().map(SampleRef::from).collect();
    let gnn = time_per_1000(n, reps, || {
        std::hint::black_box(predict_batch_with(&params, &adj, &refs, exec)?);
        Ok(())
    })?;

    let mut table = String::from("method,seconds_per_1000,speedup_vs_cfs\n");
    for (name, t) in [("cfs", cfs), ("influence", infl), ("gnn", gnn)] {
        writeln!(table, "{name},{t},{:.3}", cfs / t).expect("writing to a String");
    }
    info!(samples = n, "timed prediction");
    if let Some(out) = &cli.out {
        fs::write(out, &table).with_context(|| format!("writing {}", out.display()))?;
    }
    print!("{table}");
    Ok(())
}

fn write_plot(csv_path: &Path, title: Option<&str>, out: &Path) -> CmdResult {
    let mut reader = csv::Reader::from_path(csv_path).with_context(|| format!("reading {}", csv_path.display()))?;
    let headers = reader.headers().context("reading CSV header")?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let (x_col, x_label, scatter) = match (col("bin"), col("freq")) {
        (Some(i), _) => (i, if csv_path.to_string_lossy().contains("freq") { "branch failure frequency" } else { "load scaling α" }, false),
        (None, Some(i)) => (i, "branch failure frequency", true),
        _ => return Err(config_error(format!("{} has neither a bin nor a freq column", csv_path.display()))),
    };
    let y_col = col("value").ok_or_else(|| config_error(format!("{} has no value column", csv_path.display())))?;
    let mut points = Vec::new();
    for record in reader.records() {
        let record = record.context("reading CSV row")?;
        let value = &record[y_col];
        if value.is_empty() {
            continue;
        }
        let x: f64 = record[x_col].parse().with_context(|| format!("bad number {:?}", &record[x_col]))?;
        let y: f64 = value.parse().with_context(|| format!("bad number {value:?}"))?;
        points.push((x, y));
    }
    let stem = csv_path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let title = title.unwrap_or(&stem);
    let doc = svg::plot(title, x_label, "error", &points, scatter);
    fs::write(out, doc).with_context(|| format!("writing {}", out.display()))?;
    Ok(())
}

fn plot(cli: &Cli, args: &PlotArgs) -> CmdResult {
    let out = cli.out.clone().unwrap_or_else(|| args.csv.with_extension("svg"));
    write_plot(&args.csv, args.title.as_deref(), &out)
}
