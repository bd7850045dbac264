//! Reference posteriors: closed forms for the two binomial models,
//! history-conditional likelihoods, and an exhaustive marginal posterior for
//! tiny redirection trees.

use serde::{Deserialize, Serialize};

use crate::autodiff::special::beta_log_density;
use crate::autodiff::{neumaier_sum, CompensatedSum};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::models::{History, ModelKind, Prior};

/// Largest tree the exhaustive posterior accepts.
pub const BRUTE_FORCE_MAX_NODES: usize = 8;

/// Independent Beta(α_i, β_i) per parameter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BetaPosterior {
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
}

impl BetaPosterior {
    pub fn new(alpha: Vec<f64>, beta: Vec<f64>) -> Result<Self> {
        if alpha.len() != beta.len() {
            return Err(Error::shape("beta_posterior", "alpha and beta lengths differ"));
        }
        if alpha.iter().chain(&beta).any(|&c| !(c > 0.0 && c.is_finite())) {
            return Err(Error::inconsistent("beta concentrations must be positive and finite"));
        }
        Ok(BetaPosterior { alpha, beta })
    }

    pub fn single(alpha: f64, beta: f64) -> Result<Self> {
        BetaPosterior::new(vec![alpha], vec![beta])
    }

    pub fn len(&self) -> usize {
        self.alpha.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alpha.is_empty()
    }

    /// Sum of component log densities; `-inf` when any θ_i is outside (0, 1).
    pub fn log_density(&self, theta: &[f64]) -> f64 {
        if theta.len() != self.len() {
            return f64::NEG_INFINITY;
        }
        theta
            .iter()
            .zip(self.alpha.iter().zip(&self.beta))
            .map(|(&x, (&a, &b))| beta_log_density(x, a, b))
            .sum()
    }

    pub fn means(&self) -> Vec<f64> {
        self.alpha
            .iter()
            .zip(&self.beta)
            .map(|(a, b)| a / (a + b))
            .collect()
    }
}

/// `θ | G ~ Beta(1 + |E|, n - |E|)`.
pub fn posterior_random_connection(g: &Graph) -> Result<BetaPosterior> {
    let (n, e) = (g.node_count(), g.edge_count());
    if n == 0 || e > n - 1 {
        return Err(Error::inconsistent(format!(
            "random connection graph with {n} nodes cannot have {e} edges"
        )));
    }
    BetaPosterior::single(1.0 + e as f64, (n - e) as f64)
}

/// `θ | G ~ Beta(1 + n(d̄ - z)/2, 1 + n(2z - d̄)/2)` with `d̄` the mean degree.
pub fn posterior_connected_small_world(g: &Graph, z: usize) -> Result<BetaPosterior> {
    let n = g.node_count() as f64;
    let ring = n * z as f64 / 2.0;
    let shortcuts = g.edge_count() as f64 - ring;
    if g.node_count() == 0 || shortcuts < 0.0 || shortcuts > ring {
        return Err(Error::inconsistent(format!(
            "{} edges on {} nodes is not a ring with z={z} plus at most one shortcut per ring edge",
            g.edge_count(),
            g.node_count()
        )));
    }
    // n(d̄ - z)/2 is the shortcut count, n(2z - d̄)/2 the ring edges without one
    BetaPosterior::single(1.0 + shortcuts, 1.0 + ring - shortcuts)
}

/// Closed-form posterior for the two tractable models.
pub fn exact_posterior(kind: ModelKind, g: &Graph, z: usize) -> Result<BetaPosterior> {
    match kind {
        ModelKind::RandomConnection => posterior_random_connection(g),
        ModelKind::ConnectedSmallWorld => posterior_connected_small_world(g, z),
        other => Err(Error::config(format!("no closed-form posterior for {other}"))),
    }
}

/// `P(attach to v | G, θ)` for redirection with the seed marginalized, as the
/// pair `(a, b)` with probability `(a (1 - θ) + b θ) / |G|`.
fn redirection_factor(g: &Graph, v: usize) -> (f64, f64) {
    if g.degree(v) == 0 {
        // an isolated seed connects directly, whatever θ is
        return (1.0, 1.0);
    }
    let redirected = neumaier_sum(g.neighbors(v).iter().map(|&s| 1.0 / g.degree(s) as f64));
    (1.0, redirected)
}

/// Log-likelihood of a recorded history with each step's seed marginalized.
pub fn history_log_likelihood(kind: ModelKind, history: &History, theta: f64) -> Result<f64> {
    if !matches!(kind, ModelKind::Redirection | ModelKind::Copying) {
        return Err(Error::config(format!("history likelihood is not implemented for {kind}")));
    }
    let mut g = history.initial.clone();
    let mut total = CompensatedSum::default();
    for (t, step) in history.steps.iter().enumerate() {
        if !step.new_node || !step.removed.is_empty() || step.source != g.node_count() {
            return Err(Error::inconsistent(format!("step {t} does not add a fresh node")));
        }
        let m = g.node_count() as f64;
        let mut targets: Vec<usize> = step
            .added
            .iter()
            .map(|&(a, b)| if a == step.source { b } else { a })
            .collect();
        targets.sort_unstable();
        let prob = match kind {
            ModelKind::Redirection => {
                if targets.len() != 1 {
                    return Err(Error::inconsistent(format!(
                        "redirection step {t} adds {} edges",
                        targets.len()
                    )));
                }
                let (a, b) = redirection_factor(&g, targets[0]);
                (a * (1.0 - theta) + b * theta) / m
            }
            _ => {
                if targets.is_empty() {
                    return Err(Error::inconsistent(format!("copying step {t} adds no edges")));
                }
                copying_step_probability(&g, &targets, theta) / m
            }
        };
        total.add(prob.ln());
        crate::models::apply_history_step(&mut g, step)?;
    }
    Ok(total.value())
}

/// `Σ_s P(targets | seed s)` for probabilistic copying.
fn copying_step_probability(g: &Graph, targets: &[usize], theta: f64) -> f64 {
    let mut acc = CompensatedSum::default();
    for &s in targets {
        let nbrs = g.neighbors(s);
        // every target other than the seed must be a neighbor of the seed
        let covered = targets.iter().filter(|&&t| t != s).all(|t| nbrs.binary_search(t).is_ok());
        if !covered {
            continue;
        }
        let copied = targets.len() - 1;
        let skipped = nbrs.len() - copied;
        acc.add(theta.powi(copied as i32) * (1.0 - theta).powi(skipped as i32));
    }
    acc.value()
}

/// Probability masses over a one-dimensional parameter grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridPosterior {
    pub grid: Vec<f64>,
    pub mass: Vec<f64>,
}

/// `points` equally spaced interior points of (0, 1).
pub fn uniform_grid(points: usize) -> Vec<f64> {
    (1..=points).map(|j| j as f64 / (points + 1) as f64).collect()
}

pub const DEFAULT_GRID_POINTS: usize = 201;

impl GridPosterior {
    /// Normalizes `log_density + ln(trapezoid weight)` over the grid.
    pub fn from_log_density(grid: Vec<f64>, log_density: impl Fn(usize, f64) -> f64) -> Result<Self> {
        if grid.len() < 2 {
            return Err(Error::config("grid needs at least two points"));
        }
        let last = grid.len() - 1;
        let logs: Vec<f64> = grid
            .iter()
            .enumerate()
            .map(|(j, &x)| {
                let h = if j == 0 {
                    grid[1] - grid[0]
                } else {
                    grid[j] - grid[j - 1]
                };
                let w = if j == 0 || j == last { 0.5 * h } else { h };
                log_density(j, x) + w.ln()
            })
            .collect();
        let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !max.is_finite() {
            return Err(Error::inconsistent("density vanishes on the whole grid"));
        }
        let unnorm: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
        let total = neumaier_sum(unnorm.iter().copied());
        Ok(GridPosterior {
            grid,
            mass: unnorm.into_iter().map(|u| u / total).collect(),
        })
    }

    /// The prior itself, discretized the same way.
    pub fn from_prior(grid: Vec<f64>, prior: &Prior) -> Result<Self> {
        GridPosterior::from_log_density(grid, |_, x| prior.log_density(&[x]))
    }

    pub fn mean(&self) -> f64 {
        neumaier_sum(self.grid.iter().zip(&self.mass).map(|(x, m)| x * m))
    }
}

/// Coefficients `c_k` of `Σ_k c_k θ^k (1 - θ)^(d - k)`.
#[derive(Clone, Debug)]
struct BernsteinPoly(Vec<f64>);

impl BernsteinPoly {
    fn times_linear(&self, a: f64, b: f64, scale: f64) -> BernsteinPoly {
        let d = self.0.len();
        let mut out = vec![0.0; d + 1];
        for (k, &c) in self.0.iter().enumerate() {
            out[k] += scale * a * c;
            out[k + 1] += scale * b * c;
        }
        BernsteinPoly(out)
    }

    fn log_eval(coef: &[f64], theta: f64) -> f64 {
        let d = coef.len() - 1;
        let terms = coef
            .iter()
            .enumerate()
            .map(|(k, &c)| c * theta.powi(k as i32) * (1.0 - theta).powi((d - k) as i32));
        neumaier_sum(terms).ln()
    }
}

/// Sums the likelihood of every node ordering consistent with the tree, depth first.
struct OrderingEnumerator<'a> {
    tree: &'a Graph,
    in_order: Vec<bool>,
    /// Degrees within the nodes placed so far.
    degree: Vec<usize>,
    placed: usize,
    totals: Vec<CompensatedSum>,
    orderings: u64,
}

impl OrderingEnumerator<'_> {
    fn factor(&self, target: usize) -> (f64, f64) {
        if self.degree[target] == 0 {
            return (1.0, 1.0);
        }
        let redirected = self.tree.neighbors(target)
            .iter()
            .filter(|&&s| self.in_order[s])
            .map(|&s| 1.0 / self.degree[s] as f64);
        (1.0, neumaier_sum(redirected))
    }

    fn extend(&mut self, poly: &BernsteinPoly) {
        let n = self.tree.node_count();
        if self.placed == n {
            for (t, &c) in self.totals.iter_mut().zip(&poly.0) {
                t.add(c);
            }
            self.orderings += 1;
            return;
        }
        for v in 0..n {
            if self.in_order[v] {
                continue;
            }
            // in a tree, a node joining a connected set has exactly one earlier neighbour
            let Some(&target) = self.tree.neighbors(v).iter().find(|&&u| self.in_order[u]) else {
                continue;
            };
            let (a, b) = self.factor(target);
            let next = poly.times_linear(a, b, 1.0 / self.placed as f64);
            self.in_order[v] = true;
            self.degree[v] += 1;
            self.degree[target] += 1;
            self.placed += 1;
            self.extend(&next);
            self.placed -= 1;
            self.degree[target] -= 1;
            self.degree[v] -= 1;
            self.in_order[v] = false;
        }
    }
}

/// Marginal likelihood `P(G | θ)` of a redirection tree, up to a θ-free constant,
/// as Bernstein coefficients; also returns the number of consistent orderings.
fn redirection_marginal_likelihood(tree: &Graph) -> Result<(Vec<f64>, u64)> {
    let n = tree.node_count();
    if n > BRUTE_FORCE_MAX_NODES {
        return Err(Error::config(format!(
            "n too large: exhaustive ordering sum supports at most {BRUTE_FORCE_MAX_NODES} nodes, got {n}"
        )));
    }
    if !tree.is_tree() {
        return Err(Error::inconsistent("redirection graphs grown from one node are trees"));
    }
    let mut e = OrderingEnumerator {
        tree,
        in_order: vec![false; n],
        degree: vec![0; n],
        placed: 0,
        totals: vec![CompensatedSum::default(); n],
        orderings: 0,
    };
    for root in 0..n {
        e.in_order[root] = true;
        e.placed = 1;
        e.extend(&BernsteinPoly(vec![1.0]));
        e.in_order[root] = false;
    }
    let coef = e.totals.iter().map(CompensatedSum::value).collect();
    Ok((coef, e.orderings))
}

/// Exhaustive posterior for the redirection model on a tree with at most eight nodes.
///
/// Every ordering in which each node after the first attaches to an earlier
/// neighbour is weighted equally; seeds are summed out inside each step.
pub fn marginal_posterior_bruteforce(tree: &Graph, grid: &[f64], prior: &Prior) -> Result<GridPosterior> {
    if prior.len() != 1 {
        return Err(Error::config("redirection has a single parameter"));
    }
    let (coef, _) = redirection_marginal_likelihood(tree)?;
    GridPosterior::from_log_density(grid.to_vec(), |_, x| {
        prior.log_density(&[x]) + BernsteinPoly::log_eval(&coef, x)
    })
}

/// Number of node orderings a tree admits under single-edge growth.
pub fn consistent_orderings(tree: &Graph) -> Result<u64> {
    redirection_marginal_likelihood(tree).map(|(_, count)| count)
}

/// Exact posterior log density at the true parameter for every `(θ, G)` pair.
pub fn exact_log_probs(kind: ModelKind, z: usize, pairs: &[(Vec<f64>, Graph)]) -> Result<Vec<f64>> {
    pairs
        .iter()
        .map(|(theta, g)| Ok(exact_posterior(kind, g, z)?.log_density(theta)))
        .collect()
}

/// `H[π] + mean log p(θ | G)` under the closed-form posterior.
pub fn exact_baseline_mi(kind: ModelKind, prior: &Prior, z: usize, pairs: &[(Vec<f64>, Graph)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::config("baseline needs at least one test pair"));
    }
    let lps = exact_log_probs(kind, z, pairs)?;
    Ok(prior.entropy() + neumaier_sum(lps.iter().copied()) / lps.len() as f64)
}
