//! End-to-end acceptance checks, one PASS/FAIL line per criterion.
//!
//! Run everything with `cargo test --release --test acceptance`, or pick
//! criteria by number: `cargo test --release --test acceptance -- 4 5 8`.
//! Criteria 1 to 3 train dozens of networks and take hours on one core.
//! Setting `NETGROW_ACCEPTANCE_CACHE` to a directory keeps trained checkpoints
//! there; a cached network is reused only if its training config matches.

use std::collections::btree_map::Entry;
use std::collections::BTreeMap;
use std::path::PathBuf;
use std::rc::Rc;
use std::time::Instant;

use netgrow::autodiff::{Tape, Tensor};
use netgrow::evaluation::{mutual_information, timing, EvalReport, DEFAULT_RESAMPLES};
use netgrow::graph::Graph;
use netgrow::models::{registry, simulate, ModelKind, ModelParams};
use netgrow::nde::{
    nll_loss, small_world_network, softplus_linear_error, Batch, GraphEncoding, Nde, NdeConfig,
};
use netgrow::oracles::{
    exact_baseline_mi, exact_posterior, marginal_posterior_bruteforce, posterior_connected_small_world,
    uniform_grid, GridPosterior, DEFAULT_GRID_POINTS,
};
use netgrow::rng::{domain, seeded, stream};
use netgrow::training::{generate_dataset, train_from_scratch, Checkpoint, TrainConfig};
use rand::Rng as _;
use statrs::distribution::{Beta, Binomial, ChiSquared, ContinuousCDF, Discrete};

type Outcome = Result<(bool, String), String>;
type Data = Vec<(Vec<f64>, Graph)>;

fn fail<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

const DESK_N: usize = 200;
const SEED: u64 = 0;
/// Test graphs behind every mutual information estimate, enough for 95%
/// intervals about 0.01 nats wide on either side.
const TEST_SIZE: usize = 20_000;
/// Validation graphs for early stopping and restart selection. With the
/// default 200, selection chases validation noise by about 0.02 nats.
const VAL_SIZE: usize = 2000;

fn desk_config(kind: ModelKind, depth: usize) -> TrainConfig {
    TrainConfig {
        model: kind.name().to_string(),
        depth,
        val_size: VAL_SIZE,
        seed: SEED,
        ..TrainConfig::default()
    }
}

/// Trained networks and test sets shared between criteria.
#[derive(Default)]
struct Lab {
    nets: BTreeMap<(ModelKind, usize), Nde>,
    tests: BTreeMap<ModelKind, Rc<Data>>,
}

impl Lab {
    fn net(&mut self, kind: ModelKind, depth: usize) -> Result<&Nde, String> {
        if let Entry::Vacant(slot) = self.nets.entry((kind, depth)) {
            slot.insert(trained(kind, depth)?);
        }
        Ok(&self.nets[&(kind, depth)])
    }

    /// Drops everything held for `kind`.
    fn forget(&mut self, kind: ModelKind) {
        self.nets.retain(|(k, _), _| *k != kind);
        self.tests.remove(&kind);
    }

    /// The shared sweep test set of a model.
    fn test_set(&mut self, kind: ModelKind) -> Result<Rc<Data>, String> {
        if let Entry::Vacant(slot) = self.tests.entry(kind) {
            slot.insert(Rc::new(test_data(kind, TEST_SIZE)?));
        }
        Ok(self.tests[&kind].clone())
    }

    fn evaluate_on(&mut self, kind: ModelKind, depth: usize, test: &Data) -> Result<EvalReport, String> {
        let nde = self.net(kind, depth)?;
        let eval = mutual_information(nde, &registry(kind), test, DEFAULT_RESAMPLES, SEED).map_err(fail)?;
        let r = eval.report;
        eprintln!(
            "  {} depth {depth}: I = {:.4} [{:.4}, {:.4}] on {} graphs",
            kind.name(),
            r.mi,
            r.ci_lo.unwrap_or(f64::NAN),
            r.ci_hi.unwrap_or(f64::NAN),
            r.test_size
        );
        Ok(r)
    }

    fn evaluate(&mut self, kind: ModelKind, depth: usize) -> Result<EvalReport, String> {
        let test = self.test_set(kind)?;
        self.evaluate_on(kind, depth, &test)
    }
}

/// Trains with the desk protocol, or reuses a cached checkpoint of the same config.
fn trained(kind: ModelKind, depth: usize) -> Result<Nde, String> {
    let cfg = desk_config(kind, depth);
    let cache = std::env::var_os("NETGROW_ACCEPTANCE_CACHE")
        .map(|dir| PathBuf::from(dir).join(format!("{}-depth{depth}.json", kind.name())));
    if let Some(ckpt) = cache.as_deref().and_then(|path| Checkpoint::load(path).ok()) {
        if ckpt.training.as_ref().is_some_and(|t| t.config == cfg) {
            eprintln!("  reusing cached {} at depth {depth}", kind.name());
            return ckpt.nde().map_err(fail);
        }
    }
    let start = Instant::now();
    let ckpt = train_from_scratch(&cfg).map_err(fail)?;
    let record = ckpt.training.as_ref().expect("training record");
    eprintln!(
        "  trained {} at depth {depth}: val loss {:.4}, restart {}, {:.0} s",
        kind.name(),
        record.best_val_loss,
        record.restart,
        start.elapsed().as_secs_f64()
    );
    if let Some(path) = &cache {
        std::fs::create_dir_all(path.parent().expect("cache file has a directory")).map_err(fail)?;
        ckpt.save(path).map_err(fail)?;
    }
    ckpt.nde().map_err(fail)
}

fn test_data(kind: ModelKind, size: usize) -> Result<Data, String> {
    generate_dataset(&registry(kind), size, DESK_N, SEED, domain::DATASET_TEST).map_err(fail)
}

fn exact_posterior_match(lab: &mut Lab) -> Outcome {
    let kind = ModelKind::RandomConnection;
    let spec = registry(kind);
    let report = lab.evaluate(kind, 1)?;
    let test = lab.test_set(kind)?;
    let exact = exact_baseline_mi(kind, &spec.prior, spec.z, &test).map_err(fail)?;
    let se = report.bootstrap_se.ok_or("missing bootstrap SE")?;
    let gap = (report.mi - exact).abs();
    let pass = gap <= 0.1 && report.mi <= exact + 3.0 * se;
    Ok((
        pass,
        format!("I = {:.4}, exact = {exact:.4}, |diff| = {gap:.4} (<= 0.1), SE = {se:.4}", report.mi),
    ))
}

fn zero_depth_null(lab: &mut Lab) -> Outcome {
    let mut worst: (f64, &str) = (0.0, "");
    let mut lines = Vec::new();
    for kind in ModelKind::ALL {
        let r = lab.evaluate_on(kind, 0, &test_data(kind, TEST_SIZE)?)?;
        lines.push(format!("{}={:+.4}", kind.name(), r.mi));
        if r.mi.abs() >= worst.0 {
            worst = (r.mi.abs(), kind.name());
        }
    }
    Ok((
        worst.0 <= 0.02,
        format!("max |I| = {:.4} ({}) over {TEST_SIZE} graphs each; {}", worst.0, worst.1, lines.join(" ")),
    ))
}

fn localization_saturation(lab: &mut Lab) -> Outcome {
    let mut pass = true;
    let mut lines = Vec::new();
    for kind in [ModelKind::Redirection, ModelKind::Copying, ModelKind::DuplicationMutation] {
        let [i1, i3, i5] = [1, 3, 5].map(|d| lab.evaluate(kind, d));
        let (i1, i3, i5) = (i1?, i3?, i5?);
        let separated = i3.mi > i1.mi && i3.ci_lo.unwrap() > i1.ci_hi.unwrap();
        let saturated = i5.mi - i3.mi <= 0.05;
        pass &= separated && saturated;
        lines.push(format!(
            "{}: I1={:.4} [{:.4},{:.4}] I3={:.4} [{:.4},{:.4}] I5={:.4} ({}{})",
            kind.name(),
            i1.mi,
            i1.ci_lo.unwrap(),
            i1.ci_hi.unwrap(),
            i3.mi,
            i3.ci_lo.unwrap(),
            i3.ci_hi.unwrap(),
            i5.mi,
            if separated { "separated" } else { "NOT separated" },
            if saturated { ", saturated" } else { ", NOT saturated" },
        ));
        lab.forget(kind);
    }
    for kind in [ModelKind::ConnectedSmallWorld, ModelKind::RandomConnection] {
        let mut by_depth = Vec::new();
        for d in 0..=5 {
            by_depth.push(lab.evaluate(kind, d)?.mi);
        }
        let best = by_depth.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let close = best - by_depth[1] <= 0.05;
        pass &= close;
        let curve: Vec<String> = by_depth.iter().map(|v| format!("{v:.4}")).collect();
        lines.push(format!(
            "{}: I1={:.4} max={best:.4} over [{}]{}",
            kind.name(),
            by_depth[1],
            curve.join(","),
            if close { "" } else { " NOT within 0.05" }
        ));
        lab.forget(kind);
    }
    Ok((pass, lines.join("; ")))
}

fn small_world_construction() -> Outcome {
    let (n, z) = (DESK_N, 4);
    let spec = registry(ModelKind::ConnectedSmallWorld);
    let nde = small_world_network(n, z, 1, 1e-4).map_err(fail)?;
    let mut rng = stream(SEED, domain::GENERIC, 4);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let theta = spec.sample_prior(&mut rng);
        let (g, _) = simulate(&spec, &theta, n, &mut rng).map_err(fail)?;
        let exact = posterior_connected_small_world(&g, z).map_err(fail)?;
        let built = nde.posterior(&g).map_err(fail)?;
        worst = worst
            .max((built.alpha[0] - exact.alpha[0]).abs() / exact.alpha[0])
            .max((built.beta[0] - exact.beta[0]).abs() / exact.beta[0]);
    }
    let linear = (0..=400).map(|i| softplus_linear_error(10.0 + 0.25 * i as f64)).fold(0.0, f64::max);
    Ok((
        worst <= 5e-3 && linear < 1e-5,
        format!("max relative error {worst:.3e} (<= 5e-3) on 100 graphs; softplus linearization {linear:.3e} (< 1e-5) on [10, 110]"),
    ))
}

/// Worst relative difference between tape gradients and central differences.
fn worst_gradient_error(nde: &mut Nde, data: &Data) -> f64 {
    let depth = nde.config().gin_layers;
    let encodings: Vec<GraphEncoding> = data.iter().map(|(_, g)| GraphEncoding::compressed(g, depth).unwrap()).collect();
    let batch = Batch::new(&encodings.iter().collect::<Vec<_>>(), depth).unwrap();
    let p = data[0].0.len();
    let theta = Tensor::new(data.len(), p, data.iter().flat_map(|(t, _)| t.clone()).collect()).unwrap();
    let loss = |nde: &Nde| {
        let mut tape = Tape::new();
        let bound = nde.bind(&mut tape);
        let conc = nde.forward(&mut tape, &bound, &batch).unwrap();
        let loss = nll_loss(&mut tape, conc, &theta).unwrap();
        (tape, loss)
    };
    let (tape, l) = loss(nde);
    tape.backward(l, nde.store_mut()).unwrap();
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for id in nde.store().ids().collect::<Vec<_>>() {
        let analytic = nde.store().grad(id).clone();
        for k in 0..analytic.len() {
            let x0 = nde.store().value(id).data()[k];
            let mut at = |x: f64| {
                nde.store_mut().value_mut(id).data_mut()[k] = x;
                let (t, l) = loss(nde);
                t.value(l).item()
            };
            let numeric = (at(x0 + h) - at(x0 - h)) / (2.0 * h);
            nde.store_mut().value_mut(id).data_mut()[k] = x0;
            let a = analytic.data()[k];
            worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3));
        }
    }
    worst
}

fn gradient_correctness() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut rng = seeded(5);
    for (p, kind) in [(1, ModelKind::Redirection), (2, ModelKind::DuplicationMutation)] {
        let data = generate_dataset(&registry(kind), 4, 12, 5, domain::GENERIC).map_err(fail)?;
        for depth in 0..=5 {
            let mut nde = Nde::init(NdeConfig::new(depth, p).map_err(fail)?, &mut rng).map_err(fail)?;
            // move away from the zero biases and unit gates of a fresh network
            for id in nde.store().ids().collect::<Vec<_>>() {
                for x in nde.store_mut().value_mut(id).data_mut() {
                    *x += rng.random_range(-0.3..0.3);
                }
            }
            let err = worst_gradient_error(&mut nde, &data);
            eprintln!("  depth {depth}, {p} parameter(s): {err:.3e}");
            worst = worst.max(err);
        }
    }
    Ok((worst < 1e-5, format!("max relative error {worst:.3e} (< 1e-5) over depths 0..5, p in {{1, 2}}")))
}

fn bruteforce_agreement() -> Outcome {
    let kind = ModelKind::Redirection;
    let spec = registry(kind);
    let n = 8;
    let cfg = TrainConfig {
        n,
        depth: 3,
        ..desk_config(kind, 3)
    };
    let ckpt = train_from_scratch(&cfg).map_err(fail)?;
    let nde = ckpt.nde().map_err(fail)?;
    let test = generate_dataset(&spec, 200, n, SEED, domain::DATASET_TEST).map_err(fail)?;
    let grid = uniform_grid(DEFAULT_GRID_POINTS);
    let mut total = 0.0;
    for (_, g) in &test {
        let exact = marginal_posterior_bruteforce(g, &grid, &spec.prior).map_err(fail)?.mean();
        let approx = nde.posterior(g).map_err(fail)?.means()[0];
        total += (approx - exact).abs();
    }
    let mae = total / test.len() as f64;

    let path = Graph::from_edges(3, &[(0, 1), (1, 2)]).map_err(fail)?;
    let post = marginal_posterior_bruteforce(&path, &grid, &spec.prior).map_err(fail)?;
    let prior_mass = GridPosterior::from_prior(grid.clone(), &spec.prior).map_err(fail)?;
    let path_gap = post.mass.iter().zip(&prior_mass.mass).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    Ok((
        mae <= 0.05 && path_gap <= 1e-9,
        format!("posterior-mean MAE {mae:.4} (<= 0.05) over 200 graphs with n = 8; 3-path vs prior {path_gap:.2e} (<= 1e-9)"),
    ))
}

/// Pearson statistic of `counts` against a binomial law, merging sparse tails.
fn binomial_chi_square(counts: &[u64], trials: u64, p: f64) -> (f64, usize) {
    let law = Binomial::new(p, trials).unwrap();
    let total: u64 = counts.iter().sum();
    let mut bins: Vec<(f64, f64)> = Vec::new();
    let (mut exp, mut obs) = (0.0, 0.0);
    for k in 0..=trials {
        exp += total as f64 * law.pmf(k);
        obs += counts.get(k as usize).copied().unwrap_or(0) as f64;
        if exp >= 5.0 {
            bins.push((obs, exp));
            (exp, obs) = (0.0, 0.0);
        }
    }
    if let Some(last) = bins.last_mut() {
        last.0 += obs;
        last.1 += exp;
    }
    let stat = bins.iter().map(|(o, e)| (o - e).powi(2) / e).sum();
    (stat, bins.len())
}

fn simulator_laws() -> Outcome {
    let mut pass = true;
    let mut lines = Vec::new();
    let (n, z, seeds) = (DESK_N, 4, 500);

    for (kind, theta) in [(ModelKind::RandomConnection, 0.3), (ModelKind::ConnectedSmallWorld, 0.3)] {
        let spec = registry(kind);
        let (trials, floor) = match kind {
            ModelKind::RandomConnection => (n - 1, 0),
            _ => (n * z / 2, n * z / 2),
        };
        let mut counts = vec![0u64; trials + 1];
        for seed in 0..seeds {
            let (g, _) = simulate(&spec, &ModelParams(vec![theta]), n, &mut seeded(seed)).map_err(fail)?;
            counts[g.edge_count() - floor] += 1;
        }
        let (stat, bins) = binomial_chi_square(&counts, trials as u64, theta);
        let critical = ChiSquared::new((bins - 1) as f64).unwrap().inverse_cdf(0.99);
        pass &= stat <= critical;
        lines.push(format!("{} chi2 = {stat:.2} vs {critical:.2} ({bins} bins)", kind.name()));
    }

    for kind in [ModelKind::Redirection, ModelKind::GrowingTree] {
        let spec = registry(kind);
        let mut rng = stream(SEED, domain::GENERIC, 7);
        let mut trees = 0;
        for i in 0..seeds {
            let size = [2, 3, 10, DESK_N][i as usize % 4];
            let theta = spec.sample_prior(&mut rng);
            let (g, _) = simulate(&spec, &theta, size, &mut rng).map_err(fail)?;
            trees += usize::from(g.is_tree());
        }
        pass &= trees == seeds as usize;
        lines.push(format!("{} trees {trees}/{seeds}", kind.name()));
    }

    for kind in [ModelKind::RandomConnection, ModelKind::ConnectedSmallWorld] {
        let spec = registry(kind);
        let mut rng = stream(SEED, domain::GENERIC, 8);
        let mut covered = 0;
        for _ in 0..1000 {
            let theta = spec.sample_prior(&mut rng);
            let (g, _) = simulate(&spec, &theta, n, &mut rng).map_err(fail)?;
            let post = exact_posterior(kind, &g, z).map_err(fail)?;
            let law = Beta::new(post.alpha[0], post.beta[0]).unwrap();
            let t = theta.0[0];
            covered += usize::from(law.inverse_cdf(0.05) <= t && t <= law.inverse_cdf(0.95));
        }
        let rate = covered as f64 / 1000.0;
        pass &= (rate - 0.90).abs() <= 0.03;
        lines.push(format!("{} 90% coverage {rate:.3}", kind.name()));
    }
    Ok((pass, lines.join("; ")))
}

fn budget_fairness() -> Outcome {
    let mut pass = true;
    let mut lines = Vec::new();
    for p in 1..=2 {
        let counts: Vec<usize> = (0..=5)
            .map(|d| {
                let cfg = NdeConfig::new(d, p).unwrap();
                let declared = cfg.parameter_count();
                let actual = Nde::init(cfg, &mut seeded(0)).unwrap().store().scalar_count();
                assert_eq!(declared, actual);
                actual
            })
            .collect();
        pass &= counts.iter().all(|&c| c == counts[0]);
        lines.push(format!("p={p}: {counts:?}"));
    }
    Ok((pass, lines.join("; ")))
}

fn amortization() -> Outcome {
    let spec = registry(ModelKind::Redirection);
    let test = generate_dataset(&spec, 500, DESK_N, SEED, domain::DATASET_TEST).map_err(fail)?;
    let nde = Nde::init(NdeConfig::new(2, 1).map_err(fail)?, &mut seeded(9)).map_err(fail)?;
    let seconds = timing(&nde, &test).map_err(fail)?;
    Ok((seconds <= 10.0, format!("{seconds:.3} s (<= 10 s) for 500 graphs, n = 200, depth 2")))
}

fn main() {
    let picked: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let wanted = |id: usize| picked.is_empty() || picked.contains(&id);
    let mut lab = Lab::default();
    let mut failures = 0;
    let mut run = |id: usize, name: &str, check: &mut dyn FnMut(&mut Lab) -> Outcome| {
        if !wanted(id) {
            return;
        }
        eprintln!("criterion {id}: {name}");
        let start = Instant::now();
        let (pass, detail) = check(&mut lab).unwrap_or_else(|e| (false, format!("error: {e}")));
        failures += usize::from(!pass);
        println!(
            "[{}] {id}. {name}: {detail} ({:.1} s)",
            if pass { "PASS" } else { "FAIL" },
            start.elapsed().as_secs_f64()
        );
    };
    // cheap checks first
    run(4, "small-world construction", &mut |_| small_world_construction());
    run(5, "gradient correctness", &mut |_| gradient_correctness());
    run(7, "simulator laws", &mut |_| simulator_laws());
    run(8, "budget fairness", &mut |_| budget_fairness());
    run(9, "amortization", &mut |_| amortization());
    run(6, "brute-force agreement", &mut |_| bruteforce_agreement());
    run(2, "zero-depth null", &mut zero_depth_null);
    run(1, "exact posterior match", &mut exact_posterior_match);
    run(3, "localization saturation", &mut localization_saturation);
    if failures > 0 {
        println!("{failures} criterion(s) failed");
        std::process::exit(1);
    }
}
