//! Prior-predictive datasets, minibatch optimization with a stall-driven
//! learning-rate schedule, early stopping and restarts.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::{neumaier_sum, AdamConfig, CompensatedSum, ParamStore, Tape, Tensor};
use crate::error::{Error, Result};
use crate::graph::{Graph, Sample};
use crate::models::{registry_by_name, simulate, ModelSpec};
use crate::nde::{log_probs, nll_loss, Batch, GraphEncoding, Nde, NdeCheckpoint, NdeConfig};
use crate::rng::{domain, stream};

/// Graphs scored per forward pass outside training.
const SCORING_CHUNK: usize = 256;

/// Everything that determines a training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub model: String,
    pub n: usize,
    pub train_size: usize,
    pub val_size: usize,
    pub test_size: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub halve_patience: usize,
    pub stop_patience: usize,
    /// Whether the halving counter restarts after each halving.
    pub reset_after_halving: bool,
    /// Smallest decrease of the best validation loss that counts as progress.
    pub min_delta: f64,
    pub restarts: usize,
    pub max_epochs: usize,
    pub depth: usize,
    pub depth_budget: usize,
    pub width: usize,
    pub hidden: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: "redirection".into(),
            n: 200,
            train_size: 2000,
            val_size: 200,
            test_size: 500,
            batch_size: 32,
            lr: 1e-2,
            halve_patience: 10,
            stop_patience: 25,
            reset_after_halving: true,
            min_delta: 1e-6,
            restarts: 5,
            max_epochs: 1000,
            depth: 2,
            depth_budget: 5,
            width: 8,
            hidden: 8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<ModelSpec> {
        let spec = registry_by_name(&self.model)?;
        if self.batch_size == 0 || self.train_size < self.batch_size || self.val_size == 0 {
            return Err(Error::config(
                "dataset sizes must be at least the batch size and the validation set nonempty",
            ));
        }
        if self.halve_patience == 0 || self.stop_patience == 0 || self.restarts == 0 {
            return Err(Error::config("patience values and restarts must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || self.min_delta < 0.0 {
            return Err(Error::config("learning rate must be positive and min_delta nonnegative"));
        }
        if self.n < spec.min_nodes() {
            return Err(Error::config(format!(
                "{} needs at least {} nodes",
                spec.name(),
                spec.min_nodes()
            )));
        }
        self.nde_config(spec.prior.len())?;
        Ok(spec)
    }

    pub fn nde_config(&self, params: usize) -> Result<NdeConfig> {
        let cfg = NdeConfig {
            depth_budget: self.depth_budget,
            gin_layers: self.depth,
            width: self.width,
            hidden: self.hidden,
            params,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Record `index` of a prior-predictive dataset; independent of every other record.
pub fn generate_record(spec: &ModelSpec, n: usize, master: u64, split: u64, index: u64) -> Result<(Vec<f64>, Graph)> {
    let mut rng = stream(master, split, index);
    let theta = spec.sample_prior(&mut rng);
    let (g, _) = simulate(spec, &theta, n, &mut rng)?;
    Ok((theta.0, g))
}

/// `count` records of the given split (`domain::DATASET_TRAIN` and friends).
pub fn generate_dataset(spec: &ModelSpec, count: usize, n: usize, master: u64, split: u64) -> Result<Vec<(Vec<f64>, Graph)>> {
    (0..count as u64)
        .map(|i| generate_record(spec, n, master, split, i))
        .collect()
}

pub fn write_dataset<W: Write>(writer: W, data: &[(Vec<f64>, Graph)]) -> Result<()> {
    crate::graph::write_records(writer, data.iter().map(|(t, g)| (g, Some(t.as_slice()))))
}

/// Reads a dataset file; every record must carry `theta` of the model's arity.
pub fn read_dataset(path: &Path, params: usize) -> Result<Vec<(Vec<f64>, Graph)>> {
    let file = std::fs::File::open(path)?;
    let samples = crate::graph::read_records(std::io::BufReader::new(file))?;
    samples
        .into_iter()
        .enumerate()
        .map(|(i, Sample { graph, theta })| match theta {
            Some(t) if t.len() == params && t.iter().all(|x| *x > 0.0 && *x < 1.0) => Ok((t, graph)),
            _ => Err(Error::Parse {
                line: i + 1,
                message: format!("record needs theta with {params} values in (0, 1)"),
            }),
        })
        .collect()
}

/// Encoded graphs with their parameters, ready for batching.
#[derive(Clone, Debug)]
pub struct EncodedSet {
    pub depth: usize,
    pub encodings: Vec<GraphEncoding>,
    pub theta: Vec<Vec<f64>>,
}

impl EncodedSet {
    pub fn new(data: &[(Vec<f64>, Graph)], depth: usize) -> Result<Self> {
        let encodings = data
            .iter()
            .map(|(_, g)| GraphEncoding::compressed(g, depth))
            .collect::<Result<Vec<_>>>()?;
        Ok(EncodedSet {
            depth,
            encodings,
            theta: data.iter().map(|(t, _)| t.clone()).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.encodings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.encodings.is_empty()
    }

    /// Batch structure and parameter matrix for the given records.
    pub fn batch(&self, indices: &[usize]) -> Result<(Batch, Tensor)> {
        let encs: Vec<&GraphEncoding> = indices.iter().map(|&i| &self.encodings[i]).collect();
        let batch = Batch::new(&encs, self.depth)?;
        let p = self.theta[indices[0]].len();
        let data = indices.iter().flat_map(|&i| self.theta[i].iter().copied()).collect();
        Ok((batch, Tensor::new(indices.len(), p, data)?))
    }
}

/// A set cut into fixed scoring batches once, for repeated evaluation.
pub struct ScoringBatches {
    batches: Vec<(Batch, Tensor)>,
    len: usize,
}

impl ScoringBatches {
    pub fn new(set: &EncodedSet) -> Result<Self> {
        let indices: Vec<usize> = (0..set.len()).collect();
        let batches = indices
            .chunks(SCORING_CHUNK)
            .map(|chunk| set.batch(chunk))
            .collect::<Result<Vec<_>>>()?;
        Ok(ScoringBatches { batches, len: set.len() })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Log density of every record's parameters, in set order.
    pub fn score(&self, nde: &Nde) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(self.len);
        for (batch, theta) in &self.batches {
            let conc = nde.concentrations(batch)?;
            out.extend(log_probs(&conc, theta)?);
        }
        Ok(out)
    }

    /// Mean negative log density; non-finite values are reported as errors.
    pub fn mean_nll(&self, nde: &Nde) -> Result<f64> {
        if self.is_empty() {
            return Err(Error::config("cannot score an empty dataset"));
        }
        let lp = self.score(nde)?;
        let loss = -neumaier_sum(lp.iter().copied()) / lp.len() as f64;
        if !loss.is_finite() {
            return Err(Error::NonFinite { op: "nll" });
        }
        Ok(loss)
    }
}

/// Log density of every record's parameters under the network's posterior.
pub fn score(nde: &Nde, set: &EncodedSet) -> Result<Vec<f64>> {
    ScoringBatches::new(set)?.score(nde)
}

/// Like [`score`] on raw records, encoding one chunk at a time so memory stays
/// bounded on large test sets.
pub fn score_records(nde: &Nde, data: &[(Vec<f64>, Graph)]) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(data.len());
    for chunk in data.chunks(SCORING_CHUNK) {
        let set = EncodedSet::new(chunk, nde.config().gin_layers)?;
        out.extend(score(nde, &set)?);
    }
    Ok(out)
}

/// Mean negative log density; non-finite values are reported as errors.
pub fn mean_nll(nde: &Nde, set: &EncodedSet) -> Result<f64> {
    ScoringBatches::new(set)?.mean_nll(nde)
}

/// What the schedule decided after a validation loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Decision {
    Improved,
    Stalled,
    Halved,
    Stop,
}

/// Learning-rate halving and early stopping driven by validation stalls.
#[derive(Clone, Debug)]
pub struct Schedule {
    pub lr: f64,
    pub best: f64,
    halve_patience: usize,
    stop_patience: usize,
    reset_after_halving: bool,
    min_delta: f64,
    since_best: usize,
    since_halving: usize,
}

impl Schedule {
    pub fn new(cfg: &TrainConfig, initial_loss: f64) -> Self {
        Schedule {
            lr: cfg.lr,
            best: initial_loss,
            halve_patience: cfg.halve_patience,
            stop_patience: cfg.stop_patience,
            reset_after_halving: cfg.reset_after_halving,
            min_delta: cfg.min_delta,
            since_best: 0,
            since_halving: 0,
        }
    }

    pub fn observe(&mut self, val_loss: f64) -> Decision {
        if val_loss < self.best - self.min_delta {
            self.best = val_loss;
            self.since_best = 0;
            self.since_halving = 0;
            return Decision::Improved;
        }
        self.since_best += 1;
        self.since_halving += 1;
        if self.since_best >= self.stop_patience {
            return Decision::Stop;
        }
        if self.since_halving >= self.halve_patience {
            self.lr /= 2.0;
            if self.reset_after_halving {
                self.since_halving = 0;
            }
            return Decision::Halved;
        }
        Decision::Stalled
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
}

/// How one restart ended.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RestartSummary {
    pub restart: usize,
    pub best_epoch: usize,
    pub best_val_loss: Option<f64>,
    pub epochs: usize,
    pub failure: Option<String>,
}

/// Training provenance stored next to the weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingRecord {
    pub config: TrainConfig,
    pub seed: u64,
    pub restart: usize,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub curve: Vec<EpochRecord>,
    pub restarts: Vec<RestartSummary>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub network: NdeCheckpoint,
    pub training: Option<TrainingRecord>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    pub fn nde(&self) -> Result<Nde> {
        Nde::from_checkpoint(&self.network)
    }
}

pub fn write_metrics(path: &Path, curve: &[EpochRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_error)?;
    for row in curve {
        w.serialize(row).map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

pub(crate) fn csv_error(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::config(format!("csv: {other:?}")),
    }
}

struct RestartResult {
    store: ParamStore,
    best_epoch: usize,
    best_val: f64,
    curve: Vec<EpochRecord>,
}

fn run_restart(
    cfg: &TrainConfig,
    nde_cfg: NdeConfig,
    train: &EncodedSet,
    val: &ScoringBatches,
    restart: usize,
) -> Result<RestartResult> {
    let mut rng = stream(cfg.seed, domain::RESTART, restart as u64);
    let mut nde = Nde::init(nde_cfg, &mut rng)?;
    let adam = AdamConfig::default();
    let initial_val = val.mean_nll(&nde)?;
    let initial_train = mean_nll(&nde, train)?;
    let mut schedule = Schedule::new(cfg, initial_val);
    let mut curve = vec![EpochRecord {
        epoch: 0,
        train_loss: initial_train,
        val_loss: initial_val,
        lr: cfg.lr,
    }];
    let mut best = (nde.store().clone(), 0, initial_val);
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=cfg.max_epochs {
        let lr = schedule.lr;
        order.shuffle(&mut rng);
        let mut epoch_loss = CompensatedSum::default();
        for chunk in order.chunks(cfg.batch_size) {
            let (batch, theta) = train.batch(chunk)?;
            let mut tape = Tape::new();
            let bound = nde.bind(&mut tape);
            let conc = nde.forward(&mut tape, &bound, &batch)?;
            let loss = nll_loss(&mut tape, conc, &theta)?;
            epoch_loss.add(tape.value(loss).item() * chunk.len() as f64);
            tape.backward(loss, nde.store_mut())?;
            nde.store_mut().adam_step(lr, adam);
        }
        let train_loss = epoch_loss.value() / train.len() as f64;
        let val_loss = val.mean_nll(&nde)?;
        if !train_loss.is_finite() {
            return Err(Error::NonFinite { op: "training loss" });
        }
        curve.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            lr,
        });
        match schedule.observe(val_loss) {
            Decision::Improved => best = (nde.store().clone(), epoch, val_loss),
            Decision::Stop => break,
            Decision::Stalled | Decision::Halved => {}
        }
    }
    Ok(RestartResult {
        store: best.0,
        best_epoch: best.1,
        best_val: best.2,
        curve,
    })
}

/// Trains `cfg.restarts` networks from independent seeds and keeps the one
/// with the lowest validation loss, restored to its best epoch.
pub fn train(cfg: &TrainConfig, train_set: &EncodedSet, val_set: &EncodedSet) -> Result<Checkpoint> {
    let spec = cfg.validate()?;
    let nde_cfg = cfg.nde_config(spec.prior.len())?;
    if train_set.depth != cfg.depth || val_set.depth != cfg.depth {
        return Err(Error::config("datasets were encoded for a different depth"));
    }
    if train_set.len() < cfg.batch_size || val_set.is_empty() {
        return Err(Error::config("training set smaller than one batch or empty validation set"));
    }
    let val_batches = ScoringBatches::new(val_set)?;
    let mut summaries = Vec::with_capacity(cfg.restarts);
    let mut winner: Option<(usize, RestartResult)> = None;
    for r in 0..cfg.restarts {
        match run_restart(cfg, nde_cfg, train_set, &val_batches, r) {
            Ok(result) => {
                summaries.push(RestartSummary {
                    restart: r,
                    best_epoch: result.best_epoch,
                    best_val_loss: Some(result.best_val),
                    epochs: result.curve.len() - 1,
                    failure: None,
                });
                if winner.as_ref().is_none_or(|(_, w)| result.best_val < w.best_val) {
                    winner = Some((r, result));
                }
            }
            Err(e @ Error::NonFinite { .. }) => summaries.push(RestartSummary {
                restart: r,
                best_epoch: 0,
                best_val_loss: None,
                epochs: 0,
                failure: Some(e.to_string()),
            }),
            Err(e) => return Err(e),
        }
    }
    let (restart, result) = winner.ok_or(Error::NonFinite {
        op: "every restart diverged",
    })?;
    let nde = Nde::from_store(nde_cfg, result.store)?;
    Ok(Checkpoint {
        network: nde.to_checkpoint(spec.name()),
        training: Some(TrainingRecord {
            config: cfg.clone(),
            seed: cfg.seed,
            restart,
            best_epoch: result.best_epoch,
            best_val_loss: result.best_val,
            curve: result.curve,
            restarts: summaries,
        }),
    })
}

/// Generates the train and validation splits from `cfg.seed` and trains.
pub fn train_from_scratch(cfg: &TrainConfig) -> Result<Checkpoint> {
    let spec = cfg.validate()?;
    let train_data = generate_dataset(&spec, cfg.train_size, cfg.n, cfg.seed, domain::DATASET_TRAIN)?;
    let val_data = generate_dataset(&spec, cfg.val_size, cfg.n, cfg.seed, domain::DATASET_VAL)?;
    train(
        cfg,
        &EncodedSet::new(&train_data, cfg.depth)?,
        &EncodedSet::new(&val_data, cfg.depth)?,
    )
}
