//! Variational mutual information, bootstrap intervals and depth sweeps.

use std::collections::BTreeSet;
use std::fs::OpenOptions;
use std::path::Path;
use std::time::Instant;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::neumaier_sum;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::models::{registry_by_name, ModelKind, ModelSpec};
use crate::nde::Nde;
use crate::oracles::exact_baseline_mi;
use crate::rng::{domain, stream};
use crate::training::{csv_error, generate_dataset, score, score_records, train_from_scratch, EncodedSet, TrainConfig};

pub const DEFAULT_RESAMPLES: usize = 1000;

/// `I = H[π] - L` on a test set, with its bootstrap interval.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: String,
    pub depth: usize,
    pub mi: f64,
    pub ci_lo: Option<f64>,
    pub ci_hi: Option<f64>,
    pub bootstrap_se: Option<f64>,
    pub test_nll: f64,
    pub prior_entropy: f64,
    pub baseline: Option<f64>,
    pub test_size: usize,
    pub eval_seconds: f64,
}

/// A report together with the per-graph log densities it was computed from.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub report: EvalReport,
    pub log_probs: Vec<f64>,
}

/// Percentile interval of a resampled mean.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
    pub se: f64,
}

fn mean(values: &[f64]) -> f64 {
    neumaier_sum(values.iter().copied()) / values.len() as f64
}

/// Linear interpolation between order statistics of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (i, frac) = (pos.floor() as usize, pos.fract());
    if i + 1 >= sorted.len() {
        return sorted[sorted.len() - 1];
    }
    sorted[i] + frac * (sorted[i + 1] - sorted[i])
}

/// 95% percentile bootstrap interval of the mean of `values`, widened if
/// necessary so it contains the sample mean.
pub fn bootstrap_ci(values: &[f64], resamples: usize, seed: u64) -> Result<Interval> {
    if values.len() < 2 {
        return Err(Error::config("bootstrap needs at least two observations"));
    }
    if resamples < 2 {
        return Err(Error::config("bootstrap needs at least two resamples"));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op: "bootstrap" });
    }
    let mut rng = stream(seed, domain::BOOTSTRAP, 0);
    let n = values.len();
    let mut means: Vec<f64> = (0..resamples)
        .map(|_| neumaier_sum((0..n).map(|_| values[rng.random_range(0..n)])) / n as f64)
        .collect();
    means.sort_by(f64::total_cmp);
    let centre = mean(&means);
    let se = (neumaier_sum(means.iter().map(|m| (m - centre).powi(2))) / (resamples - 1) as f64).sqrt();
    let point = mean(values);
    Ok(Interval {
        lo: quantile(&means, 0.025).min(point),
        hi: quantile(&means, 0.975).max(point),
        se,
    })
}

/// Scores `test` under `nde` and reports the variational mutual information.
///
/// `resamples == 0` skips the bootstrap.
pub fn mutual_information(
    nde: &Nde,
    spec: &ModelSpec,
    test: &[(Vec<f64>, Graph)],
    resamples: usize,
    seed: u64,
) -> Result<Evaluation> {
    if test.is_empty() {
        return Err(Error::config("empty test set"));
    }
    if nde.config().params != spec.prior.len() {
        return Err(Error::config(format!(
            "network infers {} parameters, {} has {}",
            nde.config().params,
            spec.name(),
            spec.prior.len()
        )));
    }
    let start = Instant::now();
    let log_probs = score_records(nde, test)?;
    let eval_seconds = start.elapsed().as_secs_f64();
    if log_probs.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op: "test log density" });
    }
    let test_nll = -mean(&log_probs);
    let prior_entropy = spec.prior_entropy();
    let mi = prior_entropy - test_nll;
    let (ci_lo, ci_hi, bootstrap_se) = if resamples == 0 {
        (None, None, None)
    } else {
        let iv = bootstrap_ci(&log_probs, resamples, seed)?;
        (Some(prior_entropy + iv.lo), Some(prior_entropy + iv.hi), Some(iv.se))
    };
    let baseline = match spec.kind {
        ModelKind::RandomConnection | ModelKind::ConnectedSmallWorld => {
            Some(exact_baseline_mi(spec.kind, &spec.prior, spec.z, test)?)
        }
        _ => None,
    };
    Ok(Evaluation {
        report: EvalReport {
            model: spec.name().to_string(),
            depth: nde.config().gin_layers,
            mi,
            ci_lo,
            ci_hi,
            bootstrap_se,
            test_nll,
            prior_entropy,
            baseline,
            test_size: test.len(),
            eval_seconds,
        },
        log_probs,
    })
}

/// Wall-clock seconds to encode and score the whole test set once.
pub fn timing(nde: &Nde, test: &[(Vec<f64>, Graph)]) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::config("empty test set"));
    }
    let start = Instant::now();
    let set = EncodedSet::new(test, nde.config().gin_layers)?;
    score(nde, &set)?;
    Ok(start.elapsed().as_secs_f64())
}

/// One line of the depth-sweep CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub model: String,
    pub depth: usize,
    pub mi: f64,
    pub ci_lo: Option<f64>,
    pub ci_hi: Option<f64>,
    pub baseline: Option<f64>,
    pub receptive_field: Option<usize>,
    pub test_nll: f64,
    pub prior_entropy: f64,
    pub eval_seconds: f64,
}

impl SweepRow {
    fn from_report(report: &EvalReport, spec: &ModelSpec) -> Self {
        SweepRow {
            model: report.model.clone(),
            depth: report.depth,
            mi: report.mi,
            ci_lo: report.ci_lo,
            ci_hi: report.ci_hi,
            baseline: report.baseline,
            receptive_field: spec.receptive_field(),
            test_nll: report.test_nll,
            prior_entropy: report.prior_entropy,
            eval_seconds: report.eval_seconds,
        }
    }
}

pub fn read_sweep(path: &Path) -> Result<Vec<SweepRow>> {
    let mut reader = csv::Reader::from_path(path).map_err(csv_error)?;
    reader
        .deserialize()
        .collect::<std::result::Result<Vec<SweepRow>, _>>()
        .map_err(csv_error)
}

/// Trains and evaluates one network per depth, appending a row per depth to
/// `out`. Depths already present for this model are skipped, so an
/// interrupted sweep resumes where it stopped.
pub fn depth_sweep(
    base: &TrainConfig,
    depths: &[usize],
    resamples: usize,
    out: &Path,
    mut progress: impl FnMut(&SweepRow),
) -> Result<Vec<SweepRow>> {
    let spec = registry_by_name(&base.model)?;
    base.validate()?;
    let mut rows = if out.exists() { read_sweep(out)? } else { Vec::new() };
    let done: BTreeSet<usize> = rows
        .iter()
        .filter(|r| r.model == spec.name())
        .map(|r| r.depth)
        .collect();
    let pending: Vec<usize> = depths.iter().copied().filter(|d| !done.contains(d)).collect();
    if pending.is_empty() {
        return Ok(rows);
    }
    let test = generate_dataset(&spec, base.test_size, base.n, base.seed, domain::DATASET_TEST)?;
    for depth in pending {
        let cfg = TrainConfig {
            depth,
            ..base.clone()
        };
        let ckpt = train_from_scratch(&cfg)?;
        let nde = ckpt.nde()?;
        let eval = mutual_information(&nde, &spec, &test, resamples, base.seed)?;
        let row = SweepRow::from_report(&eval.report, &spec);
        let fresh = !out.exists() || std::fs::metadata(out)?.len() == 0;
        let file = OpenOptions::new().create(true).append(true).open(out)?;
        let mut writer = csv::WriterBuilder::new().has_headers(fresh).from_writer(file);
        writer.serialize(&row).map_err(csv_error)?;
        writer.flush()?;
        progress(&row);
        rows.push(row);
    }
    Ok(rows)
}

/// Parses `a:b` (inclusive) or a comma-separated list of depths.
pub fn parse_depths(text: &str) -> Result<Vec<usize>> {
    let bad = || Error::config(format!("cannot parse depths '{text}'; use 0:5 or 0,1,3"));
    if let Some((a, b)) = text.split_once(':') {
        let (a, b): (usize, usize) = (a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?);
        if a > b {
            return Err(bad());
        }
        return Ok((a..=b).collect());
    }
    text.split(',').map(|s| s.trim().parse().map_err(|_| bad())).collect()
}
