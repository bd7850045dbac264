//! Graph encodings consumed by the GIN stack.
//!
//! Node features after `l` layers depend only on the node's colour after `l`
//! rounds of colour refinement, because every node starts from the same
//! feature. A [`GraphEncoding`] therefore stores one row per colour class per
//! level, with the aggregation operator expressed in terms of the previous
//! level's classes. The plain form, one class per node and the self-loop
//! augmented adjacency as operator, is the special case without merging.

use std::collections::HashMap;
use std::sync::Arc;

use crate::autodiff::{Segments, SparseMatrix};
use crate::error::{Error, Result};
use crate::graph::Graph;

/// Rows at one level of the GIN stack.
#[derive(Clone, Debug, PartialEq)]
pub struct Level {
    /// Row of the previous level carrying the shortcut for each row here.
    pub parent: Vec<usize>,
    /// Aggregation row: `(previous-level row, multiplicity)` pairs, self-loop included.
    pub aggregate: Vec<Vec<(usize, f64)>>,
    /// Number of graph nodes each row stands for.
    pub count: Vec<usize>,
}

impl Level {
    pub fn rows(&self) -> usize {
        self.count.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GraphEncoding {
    n: usize,
    levels: Vec<Level>,
}

impl GraphEncoding {
    /// One row per node at every level, aggregating with `Ã = A + I`.
    pub fn plain(g: &Graph, depth: usize) -> Result<Self> {
        let n = nonempty(g)?;
        let identity: Vec<usize> = (0..n).collect();
        let aggregate: Vec<Vec<(usize, f64)>> = (0..n)
            .map(|v| {
                let mut row: Vec<(usize, f64)> = g.neighbors(v).iter().map(|&u| (u, 1.0)).collect();
                row.push((v, 1.0));
                row.sort_unstable_by_key(|&(u, _)| u);
                row
            })
            .collect();
        let mut levels = vec![Level {
            parent: Vec::new(),
            aggregate: Vec::new(),
            count: vec![1; n],
        }];
        for _ in 0..depth {
            levels.push(Level {
                parent: identity.clone(),
                aggregate: aggregate.clone(),
                count: vec![1; n],
            });
        }
        Ok(GraphEncoding { n, levels })
    }

    /// Rows merged by colour refinement; numerically equivalent to [`GraphEncoding::plain`].
    pub fn compressed(g: &Graph, depth: usize) -> Result<Self> {
        let n = nonempty(g)?;
        let mut colour = vec![0usize; n];
        let mut levels = vec![Level {
            parent: Vec::new(),
            aggregate: Vec::new(),
            count: vec![n],
        }];
        let mut signature = Vec::new();
        for _ in 0..depth {
            let mut classes: HashMap<(usize, Vec<usize>), usize> = HashMap::new();
            let mut next = vec![0usize; n];
            let mut level = Level {
                parent: Vec::new(),
                aggregate: Vec::new(),
                count: Vec::new(),
            };
            for v in 0..n {
                signature.clear();
                signature.extend(g.neighbors(v).iter().map(|&u| colour[u]));
                signature.sort_unstable();
                let key = (colour[v], signature.clone());
                let fresh = classes.len();
                let c = *classes.entry(key).or_insert(fresh);
                if c == fresh {
                    level.parent.push(colour[v]);
                    level.aggregate.push(multiplicities(colour[v], &signature));
                    level.count.push(0);
                }
                level.count[c] += 1;
                next[v] = c;
            }
            levels.push(level);
            colour = next;
        }
        Ok(GraphEncoding { n, levels })
    }

    pub fn node_count(&self) -> usize {
        self.n
    }

    pub fn depth(&self) -> usize {
        self.levels.len() - 1
    }

    pub fn level(&self, l: usize) -> &Level {
        &self.levels[l]
    }

    /// Total rows across all levels.
    pub fn size(&self) -> usize {
        self.levels.iter().map(Level::rows).sum()
    }
}

fn nonempty(g: &Graph) -> Result<usize> {
    match g.node_count() {
        0 => Err(Error::structural("cannot encode an empty graph")),
        n => Ok(n),
    }
}

/// Counts of `own` plus the sorted neighbour colours, as a sparse row.
fn multiplicities(own: usize, sorted: &[usize]) -> Vec<(usize, f64)> {
    let mut row: Vec<(usize, f64)> = Vec::with_capacity(sorted.len() + 1);
    let mut merged: Vec<usize> = sorted.to_vec();
    let at = merged.partition_point(|&c| c < own);
    merged.insert(at, own);
    for c in merged {
        match row.last_mut() {
            Some((last, w)) if *last == c => *w += 1.0,
            _ => row.push((c, 1.0)),
        }
    }
    row
}

/// Operators for one level of a block-batched set of encodings.
#[derive(Clone, Debug)]
pub struct BatchLevel {
    pub rows: usize,
    pub parent: Arc<Vec<usize>>,
    pub aggregate: Arc<SparseMatrix>,
}

/// Several encodings stacked block-diagonally, truncated to a common depth.
#[derive(Clone, Debug)]
pub struct Batch {
    pub graphs: usize,
    pub input_rows: usize,
    pub levels: Vec<BatchLevel>,
    pub pool: Arc<Segments>,
}

impl Batch {
    pub fn new(encodings: &[&GraphEncoding], depth: usize) -> Result<Self> {
        if encodings.is_empty() {
            return Err(Error::config("a batch needs at least one graph"));
        }
        if let Some(e) = encodings.iter().find(|e| e.depth() < depth) {
            return Err(Error::config(format!(
                "encoding has depth {}, batch needs {depth}",
                e.depth()
            )));
        }
        let input_rows = encodings.iter().map(|e| e.level(0).rows()).sum();
        let mut levels = Vec::with_capacity(depth);
        for l in 1..=depth {
            let mut parent = Vec::new();
            let mut aggregate = Vec::new();
            let mut prev_offset = 0;
            for e in encodings {
                let level = e.level(l);
                parent.extend(level.parent.iter().map(|&p| p + prev_offset));
                aggregate.extend(
                    level
                        .aggregate
                        .iter()
                        .map(|row| row.iter().map(|&(c, w)| (c + prev_offset, w)).collect()),
                );
                prev_offset += e.level(l - 1).rows();
            }
            levels.push(BatchLevel {
                rows: parent.len(),
                parent: Arc::new(parent),
                aggregate: Arc::new(SparseMatrix::from_rows(prev_offset, &aggregate)?),
            });
        }
        let mut segment = Vec::new();
        let mut weight = Vec::new();
        for (i, e) in encodings.iter().enumerate() {
            let n = e.node_count() as f64;
            for &c in &e.level(depth).count {
                segment.push(i);
                weight.push(c as f64 / n);
            }
        }
        Ok(Batch {
            graphs: encodings.len(),
            input_rows,
            levels,
            pool: Arc::new(Segments::new(encodings.len(), segment, weight)?),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;
    use crate::models::{registry, simulate, ModelKind, ModelParams};
    use crate::rng::seeded;

    fn path(n: usize) -> Graph {
        let edges: Vec<_> = (1..n).map(|v| (v - 1, v)).collect();
        Graph::from_edges(n, &edges).unwrap()
    }

    #[test]
    fn refinement_on_a_path() {
        let e = GraphEncoding::compressed(&path(5), 3).unwrap();
        assert_eq!(e.level(0).count, vec![5]);
        // endpoints vs interior
        assert_eq!(e.level(1).count, vec![2, 3]);
        // endpoints, next-to-endpoints, centre
        assert_eq!(e.level(2).count, vec![2, 2, 1]);
        assert_eq!(e.level(1).aggregate[0], vec![(0, 2.0)]);
        assert_eq!(e.level(1).aggregate[1], vec![(0, 3.0)]);
        assert_eq!(e.level(2).aggregate[1], vec![(0, 1.0), (1, 2.0)]);
    }

    #[test]
    fn plain_aggregation_is_adjacency_with_self_loops() {
        let g = Graph::from_edges(3, &[(0, 1), (1, 2)]).unwrap();
        let e = GraphEncoding::plain(&g, 1).unwrap();
        assert_eq!(e.level(1).aggregate[1], vec![(0, 1.0), (1, 1.0), (2, 1.0)]);
        let isolated = GraphEncoding::plain(&Graph::empty(2), 1).unwrap();
        assert_eq!(isolated.level(1).aggregate[0], vec![(0, 1.0)]);
        assert!(GraphEncoding::plain(&Graph::empty(0), 1).is_err());
        assert!(GraphEncoding::compressed(&Graph::empty(0), 1).is_err());
    }

    /// Propagates a fixed nonlinear map through both encodings.
    fn pooled(batch: &Batch) -> Vec<f64> {
        let mut h = Tensor::full(batch.input_rows, 1, 1.0);
        for level in &batch.levels {
            let agg = level.aggregate.apply(&h);
            let mut next = Tensor::zeros(level.rows, 1);
            for r in 0..level.rows {
                let v = 0.3 * h.get(level.parent[r], 0) + (0.7 * agg.get(r, 0)).tanh();
                next.set(r, 0, v);
            }
            h = next;
        }
        batch.pool.reduce(&h).into_data()
    }

    #[test]
    fn compressed_matches_plain() {
        let mut graphs = vec![path(7), Graph::empty(3)];
        for (i, kind) in [ModelKind::Redirection, ModelKind::Copying, ModelKind::ConnectedSmallWorld]
            .into_iter()
            .enumerate()
        {
            let spec = registry(kind);
            let (g, _) = simulate(&spec, &ModelParams(vec![0.4]), 60, &mut seeded(i as u64)).unwrap();
            graphs.push(g);
        }
        for depth in 0..=5 {
            let plain: Vec<_> = graphs.iter().map(|g| GraphEncoding::plain(g, depth).unwrap()).collect();
            let comp: Vec<_> = graphs.iter().map(|g| GraphEncoding::compressed(g, depth).unwrap()).collect();
            let a = pooled(&Batch::new(&plain.iter().collect::<Vec<_>>(), depth).unwrap());
            let b = pooled(&Batch::new(&comp.iter().collect::<Vec<_>>(), depth).unwrap());
            for (x, y) in a.iter().zip(&b) {
                assert!((x - y).abs() < 1e-12, "depth {depth}: {x} vs {y}");
            }
            assert!(comp.iter().zip(&plain).all(|(c, p)| c.size() <= p.size() + 1));
        }
    }

    #[test]
    fn batch_offsets_and_pool_weights() {
        let tri = Graph::from_edges(3, &[(0, 1), (1, 2), (0, 2)]).unwrap();
        let a = GraphEncoding::plain(&tri, 1).unwrap();
        let batch = Batch::new(&[&a, &a], 1).unwrap();
        assert_eq!(batch.input_rows, 6);
        assert_eq!(batch.levels[0].rows, 6);
        assert_eq!(*batch.levels[0].parent, vec![0, 1, 2, 3, 4, 5]);
        let members: Vec<usize> = (0..6).map(|r| batch.pool.segment_of(r)).collect();
        assert_eq!(members, vec![0, 0, 0, 1, 1, 1]);
        assert!((batch.pool.weight_of(4) - 1.0 / 3.0).abs() < 1e-15);
        let row: Vec<_> = batch.levels[0].aggregate.row(4).collect();
        assert_eq!(row, vec![(3, 1.0), (4, 1.0), (5, 1.0)]);
        assert!(Batch::new(&[], 0).is_err());
        assert!(Batch::new(&[&a], 2).is_err());
    }
}
