//! The `netgrow` command line.
//!
//! Exit codes: 0 success, 1 I/O failure, 2 usage or validation error,
//! 3 numeric failure.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::error::{Error, Result};
use crate::evaluation::{depth_sweep, mutual_information, parse_depths, DEFAULT_RESAMPLES};
use crate::graph::read_records;
use crate::models::{registry, registry_by_name, ModelKind};
use crate::oracles::{
    marginal_posterior_bruteforce, posterior_connected_small_world, posterior_random_connection, uniform_grid,
    DEFAULT_GRID_POINTS,
};
use crate::rng::domain;
use crate::training::{generate_dataset, read_dataset, train, write_dataset, write_metrics, Checkpoint, EncodedSet, TrainConfig};

#[derive(Debug, Parser)]
#[command(name = "netgrow", version, about = "Growing-network simulation and amortized posterior inference")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sample graphs from a model's prior predictive distribution.
    Simulate(SimulateArgs),
    /// Train a posterior estimator on simulated datasets.
    Train(TrainArgs),
    /// Score a trained estimator on a test set.
    Eval(EvalArgs),
    /// Train and evaluate one estimator per GIN depth.
    Sweep(SweepArgs),
    /// Reference posteriors for the tractable cases.
    Oracle(OracleArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    fn domain(self) -> u64 {
        match self {
            Split::Train => domain::DATASET_TRAIN,
            Split::Val => domain::DATASET_VAL,
            Split::Test => domain::DATASET_TEST,
        }
    }
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub model: String,
    #[arg(long)]
    pub n: usize,
    #[arg(long)]
    pub count: usize,
    /// Master seed; falls back to NETGROW_SEED, then 0.
    #[arg(long, env = "NETGROW_SEED")]
    pub seed: Option<u64>,
    /// Which independent stream family to draw from.
    #[arg(long, value_enum, default_value = "train")]
    pub split: Split,
    #[arg(long)]
    pub out: PathBuf,
}

/// Overrides for [`TrainConfig`]; names match its fields.
#[derive(Debug, Default, Args)]
pub struct TrainOverrides {
    /// JSON file with TrainConfig keys; flags take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub train_size: Option<usize>,
    #[arg(long)]
    pub val_size: Option<usize>,
    #[arg(long)]
    pub test_size: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub halve_patience: Option<usize>,
    #[arg(long)]
    pub stop_patience: Option<usize>,
    #[arg(long)]
    pub reset_after_halving: Option<bool>,
    #[arg(long)]
    pub min_delta: Option<f64>,
    #[arg(long)]
    pub restarts: Option<usize>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
    #[arg(long)]
    pub depth_budget: Option<usize>,
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub hidden: Option<usize>,
    /// Master seed; falls back to NETGROW_SEED, then the config file, then 0.
    #[arg(long, env = "NETGROW_SEED")]
    pub seed: Option<u64>,
}

impl TrainOverrides {
    fn resolve(&self, model: Option<&str>, depth: Option<usize>) -> Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(path) => serde_json::from_str(&std::fs::read_to_string(path)?)
                .map_err(|e| Error::config(format!("{}: {e}", path.display())))?,
            None => TrainConfig::default(),
        };
        macro_rules! apply {
            ($($field:ident),*) => {$(
                if let Some(v) = self.$field {
                    cfg.$field = v;
                }
            )*};
        }
        apply!(
            n, train_size, val_size, test_size, batch_size, lr, halve_patience, stop_patience,
            reset_after_halving, min_delta, restarts, max_epochs, depth_budget, width, hidden, seed
        );
        if let Some(m) = model {
            cfg.model = m.to_string();
        }
        if let Some(d) = depth {
            cfg.depth = d;
        }
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub model: Option<String>,
    /// Number of GIN layers.
    #[arg(long)]
    pub depth: Option<usize>,
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub val: PathBuf,
    /// Checkpoint destination.
    #[arg(long)]
    pub out: PathBuf,
    /// Per-epoch metrics of the winning restart; defaults to the checkpoint path with a .csv extension.
    #[arg(long)]
    pub metrics: Option<PathBuf>,
    #[command(flatten)]
    pub overrides: TrainOverrides,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub test: PathBuf,
    /// Expected model; a checkpoint trained on another model is rejected.
    #[arg(long)]
    pub model: Option<String>,
    /// Bootstrap resamples; 0 reports the point estimate only.
    #[arg(long, default_value_t = DEFAULT_RESAMPLES)]
    pub bootstrap: usize,
    #[arg(long, env = "NETGROW_SEED")]
    pub seed: Option<u64>,
    /// Report destination; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub model: Option<String>,
    /// Inclusive range `a:b` or a list `0,1,3`.
    #[arg(long, default_value = "0:5")]
    pub depths: String,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_RESAMPLES)]
    pub bootstrap: usize,
    #[command(flatten)]
    pub overrides: TrainOverrides,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
#[value(rename_all = "snake_case")]
pub enum OracleModel {
    RandomConnection,
    ConnectedSmallWorld,
    RedirectionBruteforce,
}

#[derive(Debug, Args)]
pub struct OracleArgs {
    #[arg(long, value_enum)]
    pub model: OracleModel,
    /// JSON-lines graph file; one posterior is printed per record.
    #[arg(long)]
    pub graph: PathBuf,
    /// Grid points for the exhaustive posterior.
    #[arg(long, default_value_t = DEFAULT_GRID_POINTS)]
    pub grid: usize,
}

/// Process exit status for an error.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Io(_) => 1,
        Error::NonFinite { .. } => 3,
        _ => 2,
    }
}

fn require_file(path: &Path) -> Result<()> {
    if !path.is_file() {
        return Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("{} does not exist", path.display()),
        )));
    }
    Ok(())
}

fn writer(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate(args) => simulate(args),
        Command::Train(args) => run_train(args),
        Command::Eval(args) => eval(args),
        Command::Sweep(args) => sweep(args),
        Command::Oracle(args) => oracle(args),
    }
}

fn simulate(args: SimulateArgs) -> Result<()> {
    let spec = registry_by_name(&args.model)?;
    if args.n < spec.min_nodes() {
        return Err(Error::config(format!("{} needs at least {} nodes", spec.name(), spec.min_nodes())));
    }
    let data = generate_dataset(&spec, args.count, args.n, args.seed.unwrap_or(0), args.split.domain())?;
    write_dataset(writer(&args.out)?, &data)?;
    let count = data.len().max(1) as f64;
    let mean_edges = data.iter().map(|(_, g)| g.edge_count() as f64).sum::<f64>() / count;
    let mean_degree = data.iter().map(|(_, g)| g.mean_degree()).sum::<f64>() / count;
    eprintln!(
        "wrote {} graphs to {}; mean |E| {mean_edges:.3}, mean degree {mean_degree:.4}",
        data.len(),
        args.out.display()
    );
    Ok(())
}

fn run_train(args: TrainArgs) -> Result<()> {
    require_file(&args.train)?;
    require_file(&args.val)?;
    let mut cfg = args.overrides.resolve(args.model.as_deref(), args.depth)?;
    let spec = registry_by_name(&cfg.model)?;
    let p = spec.prior.len();
    let train_data = read_dataset(&args.train, p)?;
    let val_data = read_dataset(&args.val, p)?;
    cfg.train_size = train_data.len();
    cfg.val_size = val_data.len();
    cfg.validate()?;
    let ckpt = train(
        &cfg,
        &EncodedSet::new(&train_data, cfg.depth)?,
        &EncodedSet::new(&val_data, cfg.depth)?,
    )?;
    ckpt.save(&args.out)?;
    let record = ckpt.training.as_ref().expect("fresh checkpoints carry their training record");
    let metrics = args.metrics.unwrap_or_else(|| args.out.with_extension("csv"));
    write_metrics(&metrics, &record.curve)?;
    eprintln!(
        "best validation loss {:.6} at epoch {} of restart {} (seed {}); prior entropy {:.6}",
        record.best_val_loss,
        record.best_epoch,
        record.restart,
        record.seed,
        spec.prior_entropy()
    );
    Ok(())
}

fn eval(args: EvalArgs) -> Result<()> {
    require_file(&args.checkpoint)?;
    require_file(&args.test)?;
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let spec = registry_by_name(&ckpt.network.model)?;
    if let Some(expected) = &args.model {
        let expected = registry_by_name(expected)?;
        if expected.kind != spec.kind {
            return Err(Error::config(format!(
                "checkpoint was trained on {}, not {}",
                spec.name(),
                expected.name()
            )));
        }
    }
    let nde = ckpt.nde()?;
    let test = read_dataset(&args.test, spec.prior.len())?;
    let report = mutual_information(&nde, &spec, &test, args.bootstrap, args.seed.unwrap_or(0))?.report;
    let json = serde_json::to_string_pretty(&report)?;
    match &args.out {
        Some(path) => std::fs::write(path, json + "\n")?,
        None => println!("{json}"),
    }
    eprintln!(
        "{} depth {}: I = {:.4} nats on {} graphs in {:.3} s",
        report.model, report.depth, report.mi, report.test_size, report.eval_seconds
    );
    Ok(())
}

fn sweep(args: SweepArgs) -> Result<()> {
    let depths = parse_depths(&args.depths)?;
    let cfg = args.overrides.resolve(args.model.as_deref(), None)?;
    cfg.validate()?;
    if let Some(&d) = depths.iter().find(|&&d| d > cfg.depth_budget) {
        return Err(Error::config(format!("depth {d} exceeds the budget {}", cfg.depth_budget)));
    }
    depth_sweep(&cfg, &depths, args.bootstrap, &args.out, |row| {
        eprintln!("{} depth {}: I = {:.4}", row.model, row.depth, row.mi);
    })?;
    Ok(())
}

fn oracle(args: OracleArgs) -> Result<()> {
    let file = File::open(&args.graph)?;
    let samples = read_records(std::io::BufReader::new(file))?;
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    for sample in samples {
        let g = &sample.graph;
        let json = match args.model {
            OracleModel::RandomConnection => serde_json::to_string(&posterior_random_connection(g)?)?,
            OracleModel::ConnectedSmallWorld => {
                let z = registry(ModelKind::ConnectedSmallWorld).z;
                serde_json::to_string(&posterior_connected_small_world(g, z)?)?
            }
            OracleModel::RedirectionBruteforce => {
                let prior = registry(ModelKind::Redirection).prior;
                serde_json::to_string(&marginal_posterior_bruteforce(g, &uniform_grid(args.grid), &prior)?)?
            }
        };
        writeln!(out, "{json}")?;
    }
    Ok(())
}
