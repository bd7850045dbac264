//! One simulator per growth model. All randomness comes from the caller's stream,
//! so a simulation is a pure function of `(spec, θ, n, stream)`.

use rand::Rng as _;
use rand_distr::{Binomial, Distribution};

use super::history::{apply_step, ordered, History, Step};
use super::{coin, sample_distinct, InitialGraph, ModelKind, ModelParams, ModelSpec};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::rng::Rng;

/// Retries allowed for a step whose new node keeps ending up isolated.
const MAX_ATTEMPTS: usize = 1_000_000;

/// Rejection draws before falling back to enumerating the absent pairs.
const REJECTION_TRIES: usize = 64;

/// Grows a graph with exactly `n` nodes and records how it was built.
pub fn simulate(spec: &ModelSpec, theta: &ModelParams, n: usize, rng: &mut Rng) -> Result<(Graph, History)> {
    theta.check(spec)?;
    if n < spec.min_nodes() {
        return Err(Error::config(format!(
            "{} needs at least {} nodes, got {n}",
            spec.kind,
            spec.min_nodes()
        )));
    }
    let th = theta.as_slice();
    let initial = initial_graph(spec, n)?;
    let mut sim = Simulation {
        graph: initial.clone(),
        steps: Vec::new(),
    };
    match spec.kind {
        ModelKind::Redirection => sim.grow(n, |g, rng| redirection_step(g, th[0], rng), rng)?,
        ModelKind::DuplicationMutation => {
            sim.grow(n, |g, rng| duplication_mutation_step(g, th[0], th[1], rng), rng)?
        }
        ModelKind::Copying => sim.grow(n, |g, rng| copying_step(g, th[0], rng), rng)?,
        ModelKind::RandomConnection => sim.grow(n, |g, rng| random_connection_step(g, th[0], rng), rng)?,
        ModelKind::GrowingTree => sim.grow(n, |g, rng| growing_tree_step(g, th[0], rng), rng)?,
        ModelKind::DuplicationComplementation => sim.grow(
            n,
            |g, rng| duplication_complementation_step(g, th[0], th[1], rng),
            rng,
        )?,
        ModelKind::JacksonRogers => sim.grow(
            n,
            |g, rng| jackson_rogers_step(g, th[0], th[1], spec.m_rnd, spec.m_nbr, rng),
            rng,
        )?,
        ModelKind::ConnectedSmallWorld => sim.add_shortcuts(spec.z, th[0], rng)?,
        ModelKind::WattsStrogatz => sim.rewire(spec.z, th[0], rng)?,
    }
    debug_assert_eq!(sim.graph.node_count(), n);
    Ok((sim.graph, History { initial, steps: sim.steps }))
}

fn initial_graph(spec: &ModelSpec, n: usize) -> Result<Graph> {
    Ok(match spec.initial {
        InitialGraph::SingleNode => Graph::empty(1),
        InitialGraph::SingleEdge => Graph::from_edges(2, &[(0, 1)])?,
        InitialGraph::Complete(m) => {
            let mut g = Graph::empty(m);
            for u in 0..m {
                for v in u + 1..m {
                    g.add_edge(u, v)?;
                }
            }
            g
        }
        InitialGraph::Ring => ring_lattice(n, spec.z)?,
    })
}

/// `n` nodes on a ring, each tied to its `z` nearest neighbours (`z` even).
pub fn ring_lattice(n: usize, z: usize) -> Result<Graph> {
    if !z.is_multiple_of(2) || n <= z {
        return Err(Error::config(format!("ring lattice needs even z < n, got z={z}, n={n}")));
    }
    let mut g = Graph::empty(n);
    for (u, v) in ring_edges(n, z) {
        g.add_edge(u, v)?;
    }
    Ok(g)
}

fn ring_edges(n: usize, z: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..n).flat_map(move |u| (1..=z / 2).map(move |j| (u, (u + j) % n)))
}

struct Simulation {
    graph: Graph,
    steps: Vec<Step>,
}

impl Simulation {
    fn grow(
        &mut self,
        n: usize,
        mut step: impl FnMut(&Graph, &mut Rng) -> Result<Step>,
        rng: &mut Rng,
    ) -> Result<()> {
        while self.graph.node_count() < n {
            let s = step(&self.graph, rng)?;
            apply_step(&mut self.graph, &s)?;
            self.steps.push(s);
        }
        Ok(())
    }

    fn add_shortcuts(&mut self, z: usize, theta: f64, rng: &mut Rng) -> Result<()> {
        let n = self.graph.node_count();
        for (u, _) in ring_edges(n, z) {
            let mut added = Vec::new();
            if coin(rng, theta) {
                let (a, b) = fresh_pair(&self.graph, n, rng)
                    .ok_or_else(|| Error::config("graph is complete; no room for a shortcut"))?;
                self.graph.add_edge(a, b)?;
                added.push((a, b));
            }
            self.steps.push(Step {
                source: u,
                new_node: false,
                seeds: Vec::new(),
                added,
                removed: Vec::new(),
            });
        }
        Ok(())
    }

    fn rewire(&mut self, z: usize, theta: f64, rng: &mut Rng) -> Result<()> {
        let n = self.graph.node_count();
        for (u, v) in ring_edges(n, z) {
            let mut step = Step {
                source: u,
                new_node: false,
                seeds: Vec::new(),
                added: Vec::new(),
                removed: Vec::new(),
            };
            if coin(rng, theta) {
                if let Some(w) = fresh_partner(&self.graph, u, rng) {
                    self.graph.remove_edge(u, v)?;
                    self.graph.add_edge(u, w)?;
                    step.removed.push(ordered(u, v));
                    step.added.push(ordered(u, w));
                }
            }
            self.steps.push(step);
        }
        Ok(())
    }
}

/// Uniform pair of distinct, currently unconnected nodes among `0..n`; labels at
/// or beyond `g.node_count()` count as isolated nodes.
fn fresh_pair(g: &Graph, n: usize, rng: &mut Rng) -> Option<(usize, usize)> {
    if n < 2 || g.edge_count() == n * (n - 1) / 2 {
        return None;
    }
    for _ in 0..REJECTION_TRIES {
        let u = rng.random_range(0..n);
        let v = rng.random_range(0..n);
        if u != v && !g.has_edge(u, v) {
            return Some(ordered(u, v));
        }
    }
    let absent: Vec<(usize, usize)> = (0..n)
        .flat_map(|u| (u + 1..n).map(move |v| (u, v)))
        .filter(|&(u, v)| !g.has_edge(u, v))
        .collect();
    Some(absent[rng.random_range(0..absent.len())])
}

/// Uniform node other than `u` and not adjacent to it.
fn fresh_partner(g: &Graph, u: usize, rng: &mut Rng) -> Option<usize> {
    let n = g.node_count();
    if g.degree(u) + 1 >= n {
        return None;
    }
    for _ in 0..REJECTION_TRIES {
        let w = rng.random_range(0..n);
        if w != u && !g.has_edge(u, w) {
            return Some(w);
        }
    }
    let candidates: Vec<usize> = (0..n).filter(|&w| w != u && !g.has_edge(u, w)).collect();
    Some(candidates[rng.random_range(0..candidates.len())])
}

fn new_node_step(g: &Graph, seeds: Vec<usize>, targets: impl IntoIterator<Item = usize>) -> Step {
    let source = g.node_count();
    let mut added: Vec<(usize, usize)> = targets.into_iter().map(|t| (t, source)).collect();
    added.sort_unstable();
    added.dedup();
    Step {
        source,
        new_node: true,
        seeds,
        added,
        removed: Vec::new(),
    }
}

fn redirection_step(g: &Graph, theta: f64, rng: &mut Rng) -> Result<Step> {
    let s = rng.random_range(0..g.node_count());
    let nbrs = g.neighbors(s);
    // an isolated seed (only the very first step) has nowhere to redirect to
    let target = if !nbrs.is_empty() && coin(rng, theta) {
        nbrs[rng.random_range(0..nbrs.len())]
    } else {
        s
    };
    Ok(new_node_step(g, vec![s], [target]))
}

fn duplication_mutation_step(g: &Graph, keep: f64, mutate: f64, rng: &mut Rng) -> Result<Step> {
    let m = g.node_count();
    for _ in 0..MAX_ATTEMPTS {
        let s = rng.random_range(0..m);
        let mut targets: Vec<usize> = g
            .neighbors(s)
            .iter()
            .copied()
            .filter(|_| coin(rng, keep))
            .collect();
        if targets.is_empty() {
            continue;
        }
        let extra = Binomial::new(m as u64, mutate / m as f64)
            .map_err(|e| Error::config(e.to_string()))?
            .sample(rng) as usize;
        targets.extend(sample_distinct(rng, m, extra));
        return Ok(new_node_step(g, vec![s], targets));
    }
    Err(Error::config(format!(
        "duplication step failed to attach a node after {MAX_ATTEMPTS} attempts"
    )))
}

fn copying_step(g: &Graph, theta: f64, rng: &mut Rng) -> Result<Step> {
    let s = rng.random_range(0..g.node_count());
    let mut targets = vec![s];
    targets.extend(g.neighbors(s).iter().copied().filter(|_| coin(rng, theta)));
    Ok(new_node_step(g, vec![s], targets))
}

fn random_connection_step(g: &Graph, theta: f64, rng: &mut Rng) -> Result<Step> {
    let source = g.node_count();
    let mut step = new_node_step(g, Vec::new(), []);
    if coin(rng, theta) {
        let pair = fresh_pair(g, source + 1, rng).expect("a growing graph always has an absent pair");
        step.added.push(pair);
        step.seeds = vec![pair.0, pair.1];
    }
    debug_assert_eq!(step.source, source);
    Ok(step)
}

fn growing_tree_step(g: &Graph, theta: f64, rng: &mut Rng) -> Result<Step> {
    // every node of a tree grown from a single edge has degree >= 1
    debug_assert!(g.degrees().iter().all(|&d| d > 0));
    let weights: Vec<f64> = g.degrees().iter().map(|&d| (d as f64).powf(theta)).collect();
    let total: f64 = weights.iter().sum();
    let mut r = rng.random::<f64>() * total;
    let mut target = weights.len() - 1;
    for (i, w) in weights.iter().enumerate() {
        if r < *w {
            target = i;
            break;
        }
        r -= w;
    }
    Ok(new_node_step(g, vec![target], [target]))
}

fn duplication_complementation_step(g: &Graph, keep: f64, link: f64, rng: &mut Rng) -> Result<Step> {
    let m = g.node_count();
    for _ in 0..MAX_ATTEMPTS {
        let s = rng.random_range(0..m);
        let mut targets = Vec::new();
        let mut removed = Vec::new();
        for &u in g.neighbors(s) {
            if coin(rng, 0.5) {
                if coin(rng, keep) {
                    targets.push(u);
                }
            } else if coin(rng, 1.0 - keep) {
                removed.push(ordered(s, u));
            }
        }
        if coin(rng, link) {
            targets.push(s);
        }
        if targets.is_empty() {
            // the new node would be isolated: the whole attempt is discarded
            continue;
        }
        let mut step = new_node_step(g, vec![s], targets);
        step.removed = removed;
        return Ok(step);
    }
    Err(Error::config(format!(
        "duplication step failed to attach a node after {MAX_ATTEMPTS} attempts"
    )))
}

fn jackson_rogers_step(
    g: &Graph,
    p_rnd: f64,
    p_nbr: f64,
    m_rnd: usize,
    m_nbr: usize,
    rng: &mut Rng,
) -> Result<Step> {
    let m = g.node_count();
    let seeds = sample_distinct(rng, m, m_rnd);
    let mut targets: Vec<usize> = seeds.iter().copied().filter(|_| coin(rng, p_rnd)).collect();
    let mut pool: Vec<usize> = seeds.iter().flat_map(|&s| g.neighbors(s).iter().copied()).collect();
    pool.sort_unstable();
    pool.dedup();
    let picks = sample_distinct(rng, pool.len(), m_nbr);
    targets.extend(picks.into_iter().map(|i| pool[i]).filter(|_| coin(rng, p_nbr)));
    let mut seeds = seeds;
    seeds.sort_unstable();
    Ok(new_node_step(g, seeds, targets))
}
