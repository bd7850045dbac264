//! Undirected simple graphs with sorted adjacency lists.
//!
//! Nodes are labeled `0..n`. Every simulator, oracle and the neural estimator
//! consume [`Graph`] values; datasets are stored one [`GraphRecord`] per line.

use std::collections::VecDeque;
use std::fmt;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Strictly increasing list of node labels.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash)]
pub struct NodeSet(Vec<usize>);

impl NodeSet {
    /// Sorts and deduplicates the labels.
    pub fn new(mut nodes: Vec<usize>) -> Self {
        nodes.sort_unstable();
        nodes.dedup();
        NodeSet(nodes)
    }

    pub fn single(v: usize) -> Self {
        NodeSet(vec![v])
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn contains(&self, v: usize) -> bool {
        self.0.binary_search(&v).is_ok()
    }

    pub fn is_subset(&self, other: &NodeSet) -> bool {
        self.0.iter().all(|&v| other.contains(v))
    }

    pub fn into_vec(self) -> Vec<usize> {
        self.0
    }
}

impl FromIterator<usize> for NodeSet {
    fn from_iter<I: IntoIterator<Item = usize>>(iter: I) -> Self {
        NodeSet::new(iter.into_iter().collect())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(into = "GraphRecord", try_from = "GraphRecord")]
pub struct Graph {
    adjacency: Vec<Vec<usize>>,
    edge_count: usize,
}

impl Graph {
    /// `n` isolated nodes.
    pub fn empty(n: usize) -> Self {
        Graph {
            adjacency: vec![Vec::new(); n],
            edge_count: 0,
        }
    }

    /// Builds a graph from an edge list; duplicate edges are merged.
    pub fn from_edges(n: usize, edges: &[(usize, usize)]) -> Result<Self> {
        let mut g = Graph::empty(n);
        for &(u, v) in edges {
            g.add_edge(u, v)?;
        }
        Ok(g)
    }

    pub fn node_count(&self) -> usize {
        self.adjacency.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edge_count
    }

    pub fn neighbors(&self, v: usize) -> &[usize] {
        &self.adjacency[v]
    }

    pub fn degree(&self, v: usize) -> usize {
        self.adjacency[v].len()
    }

    pub fn degrees(&self) -> Vec<usize> {
        self.adjacency.iter().map(Vec::len).collect()
    }

    pub fn mean_degree(&self) -> f64 {
        if self.adjacency.is_empty() {
            return 0.0;
        }
        2.0 * self.edge_count as f64 / self.node_count() as f64
    }

    pub fn has_edge(&self, u: usize, v: usize) -> bool {
        u < self.node_count() && self.adjacency[u].binary_search(&v).is_ok()
    }

    /// Appends an isolated node and returns its label.
    pub fn add_node(&mut self) -> usize {
        self.adjacency.push(Vec::new());
        self.adjacency.len() - 1
    }

    fn check_pair(&self, u: usize, v: usize) -> Result<()> {
        let n = self.node_count();
        if u >= n || v >= n {
            return Err(Error::structural(format!(
                "edge ({u}, {v}) out of range for {n} nodes"
            )));
        }
        if u == v {
            return Err(Error::structural(format!("self-loop on node {u}")));
        }
        Ok(())
    }

    /// Inserts `{u, v}`. Returns `false` when the edge was already present.
    pub fn add_edge(&mut self, u: usize, v: usize) -> Result<bool> {
        self.check_pair(u, v)?;
        match self.adjacency[u].binary_search(&v) {
            Ok(_) => Ok(false),
            Err(pos) => {
                self.adjacency[u].insert(pos, v);
                let pos = self.adjacency[v].binary_search(&u).unwrap_err();
                self.adjacency[v].insert(pos, u);
                self.edge_count += 1;
                Ok(true)
            }
        }
    }

    /// Deletes `{u, v}`. Returns `false` when the edge was absent.
    pub fn remove_edge(&mut self, u: usize, v: usize) -> Result<bool> {
        self.check_pair(u, v)?;
        match self.adjacency[u].binary_search(&v) {
            Err(_) => Ok(false),
            Ok(pos) => {
                self.adjacency[u].remove(pos);
                let pos = self.adjacency[v].binary_search(&u).unwrap();
                self.adjacency[v].remove(pos);
                self.edge_count -= 1;
                Ok(true)
            }
        }
    }

    /// Edges as `(u, v)` with `u < v`, in lexicographic order.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.adjacency.iter().enumerate().flat_map(|(u, nbrs)| {
            let start = nbrs.partition_point(|&v| v < u);
            nbrs[start..].iter().map(move |&v| (u, v))
        })
    }

    fn check_nodes(&self, nodes: &[usize]) -> Result<()> {
        let n = self.node_count();
        match nodes.iter().find(|&&v| v >= n) {
            Some(v) => Err(Error::structural(format!(
                "node {v} out of range for {n} nodes"
            ))),
            None => Ok(()),
        }
    }

    /// All nodes within shortest-path distance `k` of any seed.
    pub fn k_hop_nodes(&self, seeds: &NodeSet, k: usize) -> Result<NodeSet> {
        if seeds.is_empty() {
            return Err(Error::structural("k-hop query needs at least one seed"));
        }
        self.check_nodes(seeds.as_slice())?;
        let mut dist = vec![usize::MAX; self.node_count()];
        let mut queue = VecDeque::new();
        for &s in seeds.as_slice() {
            dist[s] = 0;
            queue.push_back(s);
        }
        while let Some(u) = queue.pop_front() {
            if dist[u] == k {
                continue;
            }
            for &v in &self.adjacency[u] {
                if dist[v] == usize::MAX {
                    dist[v] = dist[u] + 1;
                    queue.push_back(v);
                }
            }
        }
        Ok(NodeSet(
            (0..self.node_count())
                .filter(|&v| dist[v] != usize::MAX)
                .collect(),
        ))
    }

    /// The `(2k + 1)`-hop ball around `v`: every node that can influence, or be
    /// influenced by, the edges of `v` under a `k`-localized growth rule.
    pub fn receptive_field(&self, v: usize, k: usize) -> Result<NodeSet> {
        self.k_hop_nodes(&NodeSet::single(v), 2 * k + 1)
    }

    /// Induced subgraph on `nodes`, relabeled to `0..nodes.len()`. The returned
    /// map sends each new label to its original label.
    pub fn induced_subgraph(&self, nodes: &NodeSet) -> Result<(Graph, Vec<usize>)> {
        self.check_nodes(nodes.as_slice())?;
        let mut new_label = vec![usize::MAX; self.node_count()];
        for (i, &v) in nodes.as_slice().iter().enumerate() {
            new_label[v] = i;
        }
        let mut sub = Graph::empty(nodes.len());
        for (i, &v) in nodes.as_slice().iter().enumerate() {
            sub.adjacency[i] = self.adjacency[v]
                .iter()
                .filter_map(|&u| (new_label[u] != usize::MAX).then_some(new_label[u]))
                .collect();
            sub.adjacency[i].sort_unstable();
        }
        sub.edge_count = sub.adjacency.iter().map(Vec::len).sum::<usize>() / 2;
        Ok((sub, nodes.as_slice().to_vec()))
    }

    /// Copy of the graph with node `v` renamed to `perm[v]`.
    pub fn relabel(&self, perm: &[usize]) -> Result<Graph> {
        let n = self.node_count();
        let mut seen = vec![false; n];
        if perm.len() != n || perm.iter().any(|&p| p >= n || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::structural("relabeling is not a permutation"));
        }
        let mut out = Graph::empty(n);
        for (u, nbrs) in self.adjacency.iter().enumerate() {
            out.adjacency[perm[u]] = nbrs.iter().map(|&v| perm[v]).collect();
            out.adjacency[perm[u]].sort_unstable();
        }
        out.edge_count = self.edge_count;
        Ok(out)
    }

    /// Places `other` after `self`, shifting its labels by `self.node_count()`.
    pub fn disjoint_union(&self, other: &Graph) -> Graph {
        let offset = self.node_count();
        let mut out = self.clone();
        out.adjacency.extend(
            other
                .adjacency
                .iter()
                .map(|nbrs| nbrs.iter().map(|&v| v + offset).collect()),
        );
        out.edge_count += other.edge_count;
        out
    }

    pub fn is_connected(&self) -> bool {
        if self.node_count() == 0 {
            return true;
        }
        let reach = self
            .k_hop_nodes(&NodeSet::single(0), self.node_count())
            .expect("node 0 exists");
        reach.len() == self.node_count()
    }

    pub fn is_tree(&self) -> bool {
        self.node_count() > 0 && self.edge_count + 1 == self.node_count() && self.is_connected()
    }

    pub fn to_record(&self, theta: Option<Vec<f64>>) -> GraphRecord {
        GraphRecord {
            n: self.node_count(),
            edges: self.edges().map(|(u, v)| [u, v]).collect(),
            theta,
        }
    }
}

impl fmt::Display for Graph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", serde_json::to_string(&self.to_record(None)).unwrap())
    }
}

/// One line of a graph or dataset file: `{"n":3,"edges":[[0,1],[1,2]]}` with an
/// optional `"theta"` array holding the generating parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphRecord {
    pub n: usize,
    pub edges: Vec<[usize; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theta: Option<Vec<f64>>,
}

impl GraphRecord {
    /// Validates the record and builds the graph. `line` is only used in errors.
    pub fn to_graph(&self, line: usize) -> Result<Graph> {
        let err = |message: String| Error::Parse { line, message };
        let mut g = Graph::empty(self.n);
        for &[u, v] in &self.edges {
            if u >= v {
                return Err(err(format!("edge [{u},{v}] must satisfy u < v")));
            }
            if v >= self.n {
                return Err(err(format!("edge [{u},{v}] out of range for n={}", self.n)));
            }
            if !g.add_edge(u, v).map_err(|e| err(e.to_string()))? {
                return Err(err(format!("duplicate edge [{u},{v}]")));
            }
        }
        Ok(g)
    }
}

impl From<Graph> for GraphRecord {
    fn from(g: Graph) -> Self {
        g.to_record(None)
    }
}

impl TryFrom<GraphRecord> for Graph {
    type Error = Error;

    fn try_from(record: GraphRecord) -> Result<Graph> {
        record.to_graph(0)
    }
}

/// A parsed dataset line.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub graph: Graph,
    pub theta: Option<Vec<f64>>,
}

pub fn serialize_record(graph: &Graph, theta: Option<&[f64]>) -> String {
    serde_json::to_string(&graph.to_record(theta.map(<[f64]>::to_vec)))
        .expect("graph records always serialize")
}

/// Parses one record; `line` is 1-based and only used in errors.
pub fn parse_record(text: &str, line: usize) -> Result<Sample> {
    let record: GraphRecord = serde_json::from_str(text).map_err(|e| Error::Parse {
        line,
        message: e.to_string(),
    })?;
    let graph = record.to_graph(line)?;
    Ok(Sample {
        graph,
        theta: record.theta,
    })
}

/// Reads a JSON-lines file; blank lines are skipped.
pub fn read_records<R: BufRead>(reader: R) -> Result<Vec<Sample>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(parse_record(&line, i + 1)?);
    }
    Ok(out)
}

pub fn write_records<'a, W, I>(mut writer: W, samples: I) -> Result<()>
where
    W: Write,
    I: IntoIterator<Item = (&'a Graph, Option<&'a [f64]>)>,
{
    for (graph, theta) in samples {
        writer.write_all(serialize_record(graph, theta).as_bytes())?;
        writer.write_all(b"\n")?;
    }
    writer.flush()?;
    Ok(())
}
