use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeSet};

/// One application of a growth rule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Step {
    /// The source node `σ_t`.
    pub source: usize,
    /// Whether `source` was created by this step.
    pub new_node: bool,
    /// Seed nodes `S_t` whose neighborhoods were explored.
    pub seeds: Vec<usize>,
    /// Edges created, as `(u, v)` with `u < v`.
    pub added: Vec<(usize, usize)>,
    /// Edges deleted; only non-monotonic models use this.
    pub removed: Vec<(usize, usize)>,
}

impl Step {
    pub fn seed_set(&self) -> NodeSet {
        NodeSet::new(self.seeds.clone())
    }
}

pub(crate) fn ordered(u: usize, v: usize) -> (usize, usize) {
    if u < v {
        (u, v)
    } else {
        (v, u)
    }
}

/// The initial graph followed by every recorded step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub initial: Graph,
    pub steps: Vec<Step>,
}

impl History {
    /// Applies every step to the initial graph.
    pub fn replay(&self) -> Result<Graph> {
        let mut g = self.initial.clone();
        for (t, step) in self.steps.iter().enumerate() {
            apply_step(&mut g, step).map_err(|e| {
                Error::inconsistent(format!("history step {t} does not replay: {e}"))
            })?;
        }
        Ok(g)
    }

    /// Graphs `G_0, ..., G_T` before and after each step.
    pub fn snapshots(&self) -> Result<Vec<Graph>> {
        let mut g = self.initial.clone();
        let mut out = vec![g.clone()];
        for step in &self.steps {
            apply_step(&mut g, step)?;
            out.push(g.clone());
        }
        Ok(out)
    }

    pub fn is_monotonic(&self) -> bool {
        self.steps.iter().all(|s| s.removed.is_empty())
    }
}

pub(crate) fn apply_step(g: &mut Graph, step: &Step) -> Result<()> {
    if step.new_node {
        let v = g.add_node();
        if v != step.source {
            return Err(Error::inconsistent(format!(
                "new node would be {v}, step says {}",
                step.source
            )));
        }
    }
    for &(u, v) in &step.removed {
        if !g.remove_edge(u, v)? {
            return Err(Error::inconsistent(format!("edge ({u}, {v}) is not present")));
        }
    }
    for &(u, v) in &step.added {
        if !g.add_edge(u, v)? {
            return Err(Error::inconsistent(format!("edge ({u}, {v}) already present")));
        }
    }
    Ok(())
}
