//! Neural density estimator: GIN layers with scaled shortcuts, mean pooling,
//! dense residual layers and a mean-field beta head.

mod encoding;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

pub use encoding::{Batch, BatchLevel, GraphEncoding, Level};

use crate::autodiff::special::beta_log_density;
use crate::autodiff::{softplus, ParamId, ParamStore, StoreCheckpoint, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::oracles::BetaPosterior;
use crate::rng::Rng;

/// Added after the softplus so concentrations never reach zero.
pub const CONCENTRATION_FLOOR: f64 = 1e-6;

pub const CHECKPOINT_VERSION: u32 = 1;

/// Architecture shape. `gin_layers + dense_layers() == depth_budget`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NdeConfig {
    pub depth_budget: usize,
    pub gin_layers: usize,
    pub width: usize,
    pub hidden: usize,
    pub params: usize,
}

impl NdeConfig {
    /// Defaults: five layers in total, eight features and eight hidden units.
    pub fn new(gin_layers: usize, params: usize) -> Result<Self> {
        let cfg = NdeConfig {
            depth_budget: 5,
            gin_layers,
            width: 8,
            hidden: 8,
            params,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.gin_layers > self.depth_budget {
            return Err(Error::config(format!(
                "{} GIN layers exceed the depth budget {}",
                self.gin_layers, self.depth_budget
            )));
        }
        if self.width == 0 || self.hidden == 0 || self.params == 0 {
            return Err(Error::config("width, hidden units and parameter count must be positive"));
        }
        Ok(())
    }

    pub fn dense_layers(&self) -> usize {
        self.depth_budget - self.gin_layers
    }

    fn input_width(&self, layer: usize) -> usize {
        if layer == 0 {
            1
        } else {
            self.width
        }
    }

    /// Number of trainable scalars; independent of `gin_layers`.
    pub fn parameter_count(&self) -> usize {
        let layer = |inp: usize| 1 + inp * self.hidden + self.hidden + self.hidden * self.width + self.width;
        let blocks: usize = (0..self.depth_budget).map(|i| layer(self.input_width(i))).sum();
        let head_input = if self.depth_budget == 0 { 1 } else { self.width };
        blocks + head_input * 2 * self.params + 2 * self.params
    }
}

#[derive(Clone, Copy, Debug)]
struct LayerIds {
    gamma: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

/// A layer's parameters bound to a tape.
#[derive(Clone, Copy, Debug)]
pub struct LayerVars {
    pub gamma: Var,
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct HeadVars {
    pub w3: Var,
    pub b3: Var,
}

/// All parameters of one network bound to a tape.
#[derive(Clone, Debug)]
pub struct BoundParams {
    pub layers: Vec<LayerVars>,
    pub head: HeadVars,
}

#[derive(Clone, Debug)]
pub struct Nde {
    config: NdeConfig,
    store: ParamStore,
    layers: Vec<LayerIds>,
    head: (ParamId, ParamId),
}

fn glorot(rng: &mut Rng, rows: usize, cols: usize) -> Tensor {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.random_range(-limit..=limit)).collect();
    Tensor::new(rows, cols, data).expect("shape matches data")
}

fn layer_name(i: usize, field: &str) -> String {
    format!("layer{i}.{field}")
}

impl Nde {
    /// Shortcut scales of one, Glorot-uniform weights and zero biases.
    pub fn init(config: NdeConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let (w, h) = (config.width, config.hidden);
        let mut store = ParamStore::new();
        for i in 0..config.depth_budget {
            let inp = config.input_width(i);
            store.insert(layer_name(i, "gamma"), Tensor::scalar(1.0))?;
            store.insert(layer_name(i, "w1"), glorot(rng, inp, h))?;
            store.insert(layer_name(i, "b1"), Tensor::zeros(1, h))?;
            store.insert(layer_name(i, "w2"), glorot(rng, h, w))?;
            store.insert(layer_name(i, "b2"), Tensor::zeros(1, w))?;
        }
        let head_input = if config.depth_budget == 0 { 1 } else { w };
        store.insert("head.w3", glorot(rng, head_input, 2 * config.params))?;
        store.insert("head.b3", Tensor::zeros(1, 2 * config.params))?;
        Nde::from_store(config, store)
    }

    /// Wraps an existing store after checking names and shapes.
    pub fn from_store(config: NdeConfig, store: ParamStore) -> Result<Self> {
        config.validate()?;
        let (w, h) = (config.width, config.hidden);
        let lookup = |name: String, shape: (usize, usize)| -> Result<ParamId> {
            let id = store
                .id(&name)
                .ok_or_else(|| Error::config(format!("missing parameter {name}")))?;
            if store.value(id).shape() != shape {
                return Err(Error::shape(
                    "nde",
                    format!("{name} has shape {:?}, expected {shape:?}", store.value(id).shape()),
                ));
            }
            Ok(id)
        };
        let mut layers = Vec::with_capacity(config.depth_budget);
        for i in 0..config.depth_budget {
            let inp = config.input_width(i);
            layers.push(LayerIds {
                gamma: lookup(layer_name(i, "gamma"), (1, 1))?,
                w1: lookup(layer_name(i, "w1"), (inp, h))?,
                b1: lookup(layer_name(i, "b1"), (1, h))?,
                w2: lookup(layer_name(i, "w2"), (h, w))?,
                b2: lookup(layer_name(i, "b2"), (1, w))?,
            });
        }
        let head_input = if config.depth_budget == 0 { 1 } else { w };
        let head = (
            lookup("head.w3".into(), (head_input, 2 * config.params))?,
            lookup("head.b3".into(), (1, 2 * config.params))?,
        );
        if store.len() != 5 * config.depth_budget + 2 {
            return Err(Error::config("parameter store has unexpected entries"));
        }
        Ok(Nde {
            config,
            store,
            layers,
            head,
        })
    }

    pub fn config(&self) -> &NdeConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn into_store(self) -> ParamStore {
        self.store
    }

    pub fn parameter_count(&self) -> usize {
        self.store.scalar_count()
    }

    /// Sets one named parameter; used for hand-built networks.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let id = self
            .store
            .id(name)
            .ok_or_else(|| Error::config(format!("missing parameter {name}")))?;
        if self.store.value(id).shape() != value.shape() {
            return Err(Error::shape("nde", format!("{name} expects {:?}", self.store.value(id).shape())));
        }
        *self.store.value_mut(id) = value;
        Ok(())
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundParams {
        let layers = self
            .layers
            .iter()
            .map(|ids| LayerVars {
                gamma: tape.param(&self.store, ids.gamma),
                w1: tape.param(&self.store, ids.w1),
                b1: tape.param(&self.store, ids.b1),
                w2: tape.param(&self.store, ids.w2),
                b2: tape.param(&self.store, ids.b2),
            })
            .collect();
        let head = HeadVars {
            w3: tape.param(&self.store, self.head.0),
            b3: tape.param(&self.store, self.head.1),
        };
        BoundParams { layers, head }
    }

    /// Concentrations `(α_1, β_1, ..., α_p, β_p)` for every graph of the batch.
    pub fn forward(&self, tape: &mut Tape, bound: &BoundParams, batch: &Batch) -> Result<Var> {
        let ell = self.config.gin_layers;
        if batch.levels.len() != ell {
            return Err(Error::config(format!(
                "batch encodes {} levels, network has {ell} GIN layers",
                batch.levels.len()
            )));
        }
        let mut h = tape.constant(Tensor::full(batch.input_rows, 1, 1.0));
        for (level, layer) in batch.levels.iter().zip(&bound.layers) {
            h = gin_layer(tape, h, level, layer)?;
        }
        let mut xi = mean_pool(tape, h, batch)?;
        for layer in &bound.layers[ell..] {
            xi = dense_residual(tape, xi, layer)?;
        }
        beta_head(tape, xi, &bound.head)
    }

    /// Concentrations as plain numbers, one row per graph.
    pub fn concentrations(&self, batch: &Batch) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let out = self.forward(&mut tape, &bound, batch)?;
        Ok(tape.value(out).clone())
    }

    /// Posterior approximation for a single graph.
    pub fn posterior(&self, g: &Graph) -> Result<BetaPosterior> {
        let enc = GraphEncoding::compressed(g, self.config.gin_layers)?;
        let conc = self.concentrations(&Batch::new(&[&enc], self.config.gin_layers)?)?;
        let row = conc.row_slice(0);
        BetaPosterior::new(
            row.iter().step_by(2).copied().collect(),
            row.iter().skip(1).step_by(2).copied().collect(),
        )
    }

    pub fn to_checkpoint(&self, model: &str) -> NdeCheckpoint {
        NdeCheckpoint {
            version: CHECKPOINT_VERSION,
            model: model.to_string(),
            config: self.config,
            store: self.store.to_checkpoint(),
        }
    }

    pub fn from_checkpoint(ckpt: &NdeCheckpoint) -> Result<Self> {
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::config(format!(
                "unsupported checkpoint version {}",
                ckpt.version
            )));
        }
        Nde::from_store(ckpt.config, ParamStore::from_checkpoint(&ckpt.store)?)
    }
}

/// Network weights with the generating model's name.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NdeCheckpoint {
    pub version: u32,
    pub model: String,
    pub config: NdeConfig,
    pub store: StoreCheckpoint,
}

/// `b2 + tanh(b1 + X W1) W2`, row-wise.
pub fn mlp(tape: &mut Tape, x: Var, layer: &LayerVars) -> Result<Var> {
    let pre = tape.matmul(x, layer.w1)?;
    let pre = tape.add_bias_row(pre, layer.b1)?;
    let act = tape.tanh(pre)?;
    let out = tape.matmul(act, layer.w2)?;
    tape.add_bias_row(out, layer.b2)
}

/// `γ X + φ(Y)`, with a single-column `X` repeated across the output width.
fn residual(tape: &mut Tape, shortcut: Var, transformed: Var, gamma: Var) -> Result<Var> {
    let mut s = tape.scale(shortcut, gamma)?;
    let (in_cols, out_cols) = (tape.value(shortcut).cols(), tape.value(transformed).cols());
    if in_cols != out_cols {
        s = tape.broadcast_cols(s, out_cols)?;
    }
    tape.add(s, transformed)
}

/// `H' = γ H + φ(Ã H)` on one level of a batch.
pub fn gin_layer(tape: &mut Tape, h: Var, level: &BatchLevel, layer: &LayerVars) -> Result<Var> {
    let agg = tape.sparse_aggregate(level.aggregate.clone(), h)?;
    let transformed = mlp(tape, agg, layer)?;
    let shortcut = tape.gather_rows(level.parent.clone(), h)?;
    residual(tape, shortcut, transformed, layer.gamma)
}

/// Per-graph means of the final node features.
pub fn mean_pool(tape: &mut Tape, h: Var, batch: &Batch) -> Result<Var> {
    tape.segment_mean(batch.pool.clone(), h)
}

/// `ξ' = γ ξ + φ(ξ)`.
pub fn dense_residual(tape: &mut Tape, xi: Var, layer: &LayerVars) -> Result<Var> {
    let transformed = mlp(tape, xi, layer)?;
    residual(tape, xi, transformed, layer.gamma)
}

/// `softplus(b3 + ξ W3)` plus the concentration floor.
pub fn beta_head(tape: &mut Tape, xi: Var, head: &HeadVars) -> Result<Var> {
    let pre = tape.matmul(xi, head.w3)?;
    let pre = tape.add_bias_row(pre, head.b3)?;
    let conc = tape.softplus(pre)?;
    tape.add_scalar(conc, CONCENTRATION_FLOOR)
}

/// Mean negative beta log density of `theta` (one row per graph).
pub fn nll_loss(tape: &mut Tape, conc: Var, theta: &Tensor) -> Result<Var> {
    let (rows, cols) = tape.value(conc).shape();
    if theta.rows() != rows || 2 * theta.cols() != cols {
        return Err(Error::shape(
            "nll_loss",
            format!("{rows}x{cols} concentrations for {:?} parameters", theta.shape()),
        ));
    }
    let p = theta.cols();
    let alpha = tape.select_cols(conc, (0..p).map(|i| 2 * i).collect())?;
    let beta = tape.select_cols(conc, (0..p).map(|i| 2 * i + 1).collect())?;
    let log_theta = tape.constant(theta.map(f64::ln));
    let log_rest = tape.constant(theta.map(|x| (1.0 - x).ln()));
    let total = tape.add(alpha, beta)?;
    let lg_total = tape.lgamma(total)?;
    let lg_alpha = tape.lgamma(alpha)?;
    let lg_beta = tape.lgamma(beta)?;
    let am1 = tape.add_scalar(alpha, -1.0)?;
    let bm1 = tape.add_scalar(beta, -1.0)?;
    let ta = tape.mul(am1, log_theta)?;
    let tb = tape.mul(bm1, log_rest)?;
    let norm = tape.sub(lg_total, lg_alpha)?;
    let norm = tape.sub(norm, lg_beta)?;
    let lp = tape.add(norm, ta)?;
    let lp = tape.add(lp, tb)?;
    let sum = tape.sum(lp)?;
    tape.mul_scalar(sum, -1.0 / rows as f64)
}

/// Log density of each row of `theta` under the matching row of concentrations.
pub fn log_probs(conc: &Tensor, theta: &Tensor) -> Result<Vec<f64>> {
    if theta.rows() != conc.rows() || 2 * theta.cols() != conc.cols() {
        return Err(Error::shape("log_probs", "concentrations do not match parameters"));
    }
    Ok((0..conc.rows())
        .map(|r| {
            let c = conc.row_slice(r);
            theta
                .row_slice(r)
                .iter()
                .enumerate()
                .map(|(i, &x)| beta_log_density(x, c[2 * i], c[2 * i + 1]))
                .sum()
        })
        .collect())
}

/// Width-one network whose concentrations reproduce the connected small world
/// posterior `Beta(1 + n(d̄ - z)/2, 1 + n(2z - d̄)/2)` for graphs with `n` nodes.
///
/// The first GIN layer turns `Ã 1 = d + 1` into `tanh(ε(d + 1))/ε - 1 ≈ d`,
/// pooling yields `d̄`, and the head is the affine map to the two
/// concentrations. Softplus is close to the identity only for large inputs, so
/// the first dense layer adds steep tanh steps that pull `d̄` onto the softplus
/// preimage wherever a concentration is 4 or less. Remaining layers are
/// identities.
pub fn small_world_network(n: usize, z: usize, gin_layers: usize, epsilon: f64) -> Result<Nde> {
    if gin_layers == 0 || gin_layers >= 5 {
        return Err(Error::config("the construction needs between one and four GIN layers"));
    }
    let config = NdeConfig {
        depth_budget: 5,
        gin_layers,
        width: 1,
        hidden: 8,
        params: 1,
    };
    let mut nde = Nde::init(config, &mut crate::rng::seeded(0))?;
    let hidden = |values: &[(usize, f64)]| {
        let mut t = Tensor::zeros(1, 8);
        for &(i, v) in values {
            t.set(0, i, v);
        }
        t
    };
    let column = |values: &[(usize, f64)]| {
        let mut t = Tensor::zeros(8, 1);
        for &(i, v) in values {
            t.set(i, 0, v);
        }
        t
    };
    for i in 0..5 {
        nde.set(&layer_name(i, "gamma"), Tensor::scalar(1.0))?;
        nde.set(&layer_name(i, "w1"), Tensor::zeros(1, 8))?;
        nde.set(&layer_name(i, "b1"), Tensor::zeros(1, 8))?;
        nde.set(&layer_name(i, "w2"), Tensor::zeros(8, 1))?;
        nde.set(&layer_name(i, "b2"), Tensor::zeros(1, 1))?;
    }
    nde.set("layer0.gamma", Tensor::scalar(0.0))?;
    nde.set("layer0.w1", hidden(&[(0, epsilon)]))?;
    nde.set("layer0.w2", column(&[(0, 1.0 / epsilon)]))?;
    nde.set("layer0.b2", Tensor::scalar(-1.0))?;

    let (nf, zf) = (n as f64, z as f64);
    let half = nf / 2.0;
    // α = 1 + half (d̄ - z) and β = 1 + half (2z - d̄); one shortcut moves d̄ by 2/n
    let spacing = 2.0 / nf;
    let steep = 10.0 / spacing;
    let gap = |c: f64| (c.exp() - 1.0).ln() - c;
    let (mut w1, mut b1, mut w2) = (Vec::new(), Vec::new(), Vec::new());
    let mut offset = 0.0;
    for k in 0..4 {
        let c = (k + 1) as f64;
        let next = if k == 3 { 0.0 } else { gap(c + 1.0) };
        let delta = (gap(c) - next) / half;
        // α side: step down between α = k + 1 and α = k + 2
        let t = zf + (k as f64 + 0.5) * spacing;
        w1.push((k, steep));
        b1.push((k, -steep * t));
        w2.push((k, -delta / 2.0));
        offset += delta / 2.0;
        // β side: mirrored around d̄ = 2z, entering the head with the opposite sign
        let t = 2.0 * zf - (k as f64 + 0.5) * spacing;
        w1.push((k + 4, steep));
        b1.push((k + 4, -steep * t));
        w2.push((k + 4, -delta / 2.0));
        offset -= delta / 2.0;
    }
    let first_dense = gin_layers;
    nde.set(&layer_name(first_dense, "w1"), hidden(&w1))?;
    nde.set(&layer_name(first_dense, "b1"), hidden(&b1))?;
    nde.set(&layer_name(first_dense, "w2"), column(&w2))?;
    nde.set(&layer_name(first_dense, "b2"), Tensor::scalar(offset))?;

    nde.set("head.w3", Tensor::row(vec![half, -half]))?;
    nde.set("head.b3", Tensor::row(vec![1.0 - half * zf, 1.0 + nf * zf]))?;
    Ok(nde)
}

/// Relative error of `softplus(x) ≈ x`.
pub fn softplus_linear_error(x: f64) -> f64 {
    (softplus(x) - x).abs() / x.abs()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{registry, simulate, ModelKind, ModelParams};
    use crate::oracles::posterior_connected_small_world;
    use crate::rng::seeded;

    fn path(n: usize) -> Graph {
        let edges: Vec<_> = (1..n).map(|v| (v - 1, v)).collect();
        Graph::from_edges(n, &edges).unwrap()
    }

    fn tape_with(nde: &Nde) -> (Tape, BoundParams) {
        let mut tape = Tape::new();
        let bound = nde.bind(&mut tape);
        (tape, bound)
    }

    fn single_layer(w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor, gamma: f64) -> (Tape, LayerVars) {
        let mut tape = Tape::new();
        let layer = LayerVars {
            gamma: tape.constant(Tensor::scalar(gamma)),
            w1: tape.constant(w1),
            b1: tape.constant(b1),
            w2: tape.constant(w2),
            b2: tape.constant(b2),
        };
        (tape, layer)
    }

    #[test]
    fn mlp_examples() {
        let (mut tape, layer) = single_layer(
            Tensor::zeros(1, 8),
            Tensor::zeros(1, 8),
            Tensor::zeros(8, 1),
            Tensor::scalar(2.5),
            0.0,
        );
        let x = tape.constant(Tensor::column(vec![1.0, -4.0, 9.0]));
        let y = mlp(&mut tape, x, &layer).unwrap();
        assert_eq!(tape.value(y).data(), &[2.5, 2.5, 2.5]);

        let (mut tape, layer) = single_layer(
            Tensor::full(1, 8, 1.0),
            Tensor::zeros(1, 8),
            Tensor::full(8, 1, 1.0),
            Tensor::zeros(1, 1),
            0.0,
        );
        let x = tape.constant(Tensor::scalar(1.0));
        let y = mlp(&mut tape, x, &layer).unwrap();
        assert!((tape.value(y).item() - 8.0 * 1f64.tanh()).abs() < 1e-14);
        assert!((tape.value(y).item() - 6.0928).abs() < 1e-4);

        let eps = 1e-4;
        let (mut tape, layer) = single_layer(
            Tensor::scalar(eps),
            Tensor::zeros(1, 1),
            Tensor::scalar(1.0 / eps),
            Tensor::scalar(-1.0),
            0.0,
        );
        let x = tape.constant(Tensor::column(vec![1.0, 5.0, 13.0]));
        let y = mlp(&mut tape, x, &layer).unwrap();
        for (out, x) in tape.value(y).data().iter().zip([1.0f64, 5.0, 13.0]) {
            assert!((out - (x - 1.0)).abs() <= 1.01 * eps * eps * x.powi(3) / 3.0);
        }
        let bad = tape.constant(Tensor::zeros(2, 3));
        assert!(mlp(&mut tape, bad, &layer).is_err());
    }

    #[test]
    fn gin_layer_examples() {
        let g = Graph::from_edges(5, &[(0, 1), (1, 2), (1, 3)]).unwrap();
        let enc = GraphEncoding::plain(&g, 1).unwrap();
        let batch = Batch::new(&[&enc], 1).unwrap();
        let eps = 1e-4;
        let (mut tape, layer) = single_layer(
            Tensor::scalar(eps),
            Tensor::zeros(1, 1),
            Tensor::scalar(1.0 / eps),
            Tensor::scalar(-1.0),
            0.0,
        );
        let h = tape.constant(Tensor::full(5, 1, 1.0));
        let out = gin_layer(&mut tape, h, &batch.levels[0], &layer).unwrap();
        let bound = eps * eps * 4f64.powi(3) / 3.0;
        for (v, &d) in g.degrees().iter().enumerate() {
            assert!((tape.value(out).get(v, 0) - d as f64).abs() <= bound * 1.01, "node {v}");
        }
        // the isolated node sees only its self-loop
        assert!(tape.value(out).get(4, 0).abs() < 1e-8);

        let (mut tape, layer) = single_layer(
            Tensor::zeros(3, 8),
            Tensor::zeros(1, 8),
            Tensor::zeros(8, 3),
            Tensor::zeros(1, 3),
            1.0,
        );
        let values = Tensor::new(5, 3, (0..15).map(|i| i as f64 * 0.1).collect()).unwrap();
        let h = tape.constant(values.clone());
        let out = gin_layer(&mut tape, h, &batch.levels[0], &layer).unwrap();
        assert_eq!(tape.value(out), &values);
    }

    #[test]
    fn pooling_examples() {
        let ring = crate::models::ring_lattice(10, 4).unwrap();
        let enc = GraphEncoding::plain(&ring, 0).unwrap();
        let batch = Batch::new(&[&enc], 0).unwrap();
        let mut tape = Tape::new();
        let h = tape.constant(Tensor::column(ring.degrees().iter().map(|&d| d as f64).collect()));
        let xi = mean_pool(&mut tape, h, &batch).unwrap();
        assert_eq!(tape.value(xi).item(), 4.0);

        let (a, b) = (path(3), path(6));
        let ea = GraphEncoding::plain(&a, 0).unwrap();
        let eb = GraphEncoding::plain(&b, 0).unwrap();
        let batch = Batch::new(&[&ea, &eb], 0).unwrap();
        let vals: Vec<f64> = (0..9).map(|i| (i * i) as f64).collect();
        let h = tape.constant(Tensor::column(vals.clone()));
        let xi = mean_pool(&mut tape, h, &batch).unwrap();
        let want = [vals[..3].iter().sum::<f64>() / 3.0, vals[3..].iter().sum::<f64>() / 6.0];
        for (x, w) in tape.value(xi).data().iter().zip(want) {
            assert!((x - w).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_depth_pool_is_one() {
        let nde = Nde::init(NdeConfig::new(0, 1).unwrap(), &mut seeded(1)).unwrap();
        let graphs = [path(4), Graph::empty(7), crate::models::ring_lattice(12, 4).unwrap()];
        let encs: Vec<_> = graphs.iter().map(|g| GraphEncoding::compressed(g, 0).unwrap()).collect();
        let batch = Batch::new(&encs.iter().collect::<Vec<_>>(), 0).unwrap();
        let (mut tape, _) = tape_with(&nde);
        let h = tape.constant(Tensor::full(batch.input_rows, 1, 1.0));
        let xi = mean_pool(&mut tape, h, &batch).unwrap();
        assert_eq!(tape.value(xi).data(), &[1.0, 1.0, 1.0]);
        let conc = nde.concentrations(&batch).unwrap();
        assert_eq!(conc.row_slice(0), conc.row_slice(1));
        assert_eq!(conc.row_slice(0), conc.row_slice(2));
    }

    #[test]
    fn dense_and_head_examples() {
        let (mut tape, layer) = single_layer(
            Tensor::zeros(2, 8),
            Tensor::zeros(1, 8),
            Tensor::zeros(8, 2),
            Tensor::zeros(1, 2),
            1.0,
        );
        let xi = tape.constant(Tensor::row(vec![0.3, -2.0]));
        let out = dense_residual(&mut tape, xi, &layer).unwrap();
        assert_eq!(tape.value(out).data(), &[0.3, -2.0]);

        let (mut tape, layer) = single_layer(
            Tensor::full(2, 8, 0.1),
            Tensor::zeros(1, 8),
            Tensor::full(8, 2, 0.5),
            Tensor::row(vec![1.0, 2.0]),
            0.0,
        );
        let xi = tape.constant(Tensor::row(vec![0.3, -2.0]));
        let out = dense_residual(&mut tape, xi, &layer).unwrap();
        let direct = mlp(&mut tape, xi, &layer).unwrap();
        assert_eq!(tape.value(out), tape.value(direct));

        let mut tape = Tape::new();
        let head = HeadVars {
            w3: tape.constant(Tensor::zeros(2, 4)),
            b3: tape.constant(Tensor::zeros(1, 4)),
        };
        let xi = tape.constant(Tensor::row(vec![0.3, -2.0]));
        let conc = beta_head(&mut tape, xi, &head).unwrap();
        for &c in tape.value(conc).data() {
            assert!((c - 2f64.ln()).abs() < 1e-5);
        }
        let head = HeadVars {
            w3: tape.constant(Tensor::zeros(2, 2)),
            b3: tape.constant(Tensor::row(vec![40.0, 10.0])),
        };
        let conc = beta_head(&mut tape, xi, &head).unwrap();
        assert!((tape.value(conc).get(0, 0) - 40.0).abs() / 40.0 < 1e-7);
        assert!(softplus_linear_error(10.0) < 1e-5);
    }

    #[test]
    fn log_prob_examples() {
        let theta = Tensor::new(3, 1, vec![0.37, 0.5, 0.5]).unwrap();
        let conc = Tensor::new(3, 2, vec![1.0, 1.0, 2.0, 1.0, 3.0, 3.0]).unwrap();
        let lp = log_probs(&conc, &theta).unwrap();
        assert!(lp[0].abs() < 1e-14);
        assert!(lp[1].abs() < 1e-14);
        assert!((lp[2] - 1.875f64.ln()).abs() < 1e-12);
        let mut tape = Tape::new();
        let c = tape.constant(conc);
        let loss = nll_loss(&mut tape, c, &theta).unwrap();
        assert!((tape.value(loss).item() + lp.iter().sum::<f64>() / 3.0).abs() < 1e-14);
        assert!(nll_loss(&mut tape, c, &Tensor::zeros(2, 1)).is_err());
    }

    fn sample_graphs(kind: ModelKind, count: usize, n: usize, seed: u64) -> Vec<(Vec<f64>, Graph)> {
        let spec = registry(kind);
        let mut rng = seeded(seed);
        (0..count)
            .map(|_| {
                let theta = spec.sample_prior(&mut rng);
                let (g, _) = simulate(&spec, &theta, n, &mut rng).unwrap();
                (theta.0, g)
            })
            .collect()
    }

    fn batch_loss(nde: &Nde, data: &[(Vec<f64>, Graph)], compressed: bool) -> f64 {
        let ell = nde.config().gin_layers;
        let encs: Vec<_> = data
            .iter()
            .map(|(_, g)| {
                if compressed {
                    GraphEncoding::compressed(g, ell).unwrap()
                } else {
                    GraphEncoding::plain(g, ell).unwrap()
                }
            })
            .collect();
        let batch = Batch::new(&encs.iter().collect::<Vec<_>>(), ell).unwrap();
        let p = data[0].0.len();
        let theta = Tensor::new(data.len(), p, data.iter().flat_map(|(t, _)| t.clone()).collect()).unwrap();
        let (mut tape, bound) = tape_with(nde);
        let conc = nde.forward(&mut tape, &bound, &batch).unwrap();
        let loss = nll_loss(&mut tape, conc, &theta).unwrap();
        tape.value(loss).item()
    }

    #[test]
    fn batched_loss_is_mean_of_singletons() {
        let data = sample_graphs(ModelKind::DuplicationMutation, 6, 30, 3);
        for ell in [0, 2, 5] {
            let nde = Nde::init(NdeConfig::new(ell, 2).unwrap(), &mut seeded(ell as u64)).unwrap();
            let batched = batch_loss(&nde, &data, true);
            let singles: f64 = data.iter().map(|d| batch_loss(&nde, std::slice::from_ref(d), true)).sum::<f64>() / 6.0;
            assert!((batched - singles).abs() < 1e-10, "ell={ell}");
            assert!((batched - batch_loss(&nde, &data, false)).abs() < 1e-12);
        }
    }

    #[test]
    fn permutation_invariance() {
        let data = sample_graphs(ModelKind::Copying, 3, 40, 9);
        let nde = Nde::init(NdeConfig::new(3, 1).unwrap(), &mut seeded(4)).unwrap();
        let mut rng = seeded(77);
        for (theta, g) in &data {
            let perm = crate::models::sample_distinct(&mut rng, g.node_count(), g.node_count());
            let h = g.relabel(&perm).unwrap();
            let a = nde.posterior(g).unwrap().log_density(theta);
            let b = nde.posterior(&h).unwrap().log_density(theta);
            assert!((a - b).abs() < 1e-9);
            let plain = |graph: &Graph| {
                let e = GraphEncoding::plain(graph, 3).unwrap();
                nde.concentrations(&Batch::new(&[&e], 3).unwrap()).unwrap()
            };
            let (ca, cb) = (plain(g), plain(&h));
            for (x, y) in ca.data().iter().zip(cb.data()) {
                assert!((x - y).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn disjoint_copies_pool_identically() {
        let (_, g) = sample_graphs(ModelKind::Redirection, 1, 25, 5).remove(0);
        let twice = g.disjoint_union(&g);
        let nde = Nde::init(NdeConfig::new(4, 1).unwrap(), &mut seeded(2)).unwrap();
        let a = nde.posterior(&g).unwrap();
        let b = nde.posterior(&twice).unwrap();
        assert!((a.alpha[0] - b.alpha[0]).abs() < 1e-12);
        assert!((a.beta[0] - b.beta[0]).abs() < 1e-12);
    }

    #[test]
    fn parameter_budget_is_constant() {
        for p in 1..=2 {
            let counts: Vec<usize> = (0..=5)
                .map(|ell| {
                    let cfg = NdeConfig::new(ell, p).unwrap();
                    let nde = Nde::init(cfg, &mut seeded(0)).unwrap();
                    assert_eq!(nde.parameter_count(), cfg.parameter_count());
                    nde.parameter_count()
                })
                .collect();
            assert!(counts.windows(2).all(|w| w[0] == w[1]), "{counts:?}");
        }
        assert_eq!(NdeConfig::new(2, 1).unwrap().parameter_count(), 89 + 4 * 145 + 16 + 2);
        assert!(NdeConfig::new(6, 1).is_err());
    }

    #[test]
    fn initialization() {
        let nde = Nde::init(NdeConfig::new(2, 1).unwrap(), &mut seeded(0)).unwrap();
        let store = nde.store();
        assert_eq!(store.value(store.id("layer3.gamma").unwrap()).item(), 1.0);
        assert!(store.value(store.id("layer1.b1").unwrap()).data().iter().all(|&b| b == 0.0));
        let limit = (6.0f64 / 16.0).sqrt();
        let w = store.value(store.id("layer1.w1").unwrap());
        assert!(w.data().iter().all(|x| x.abs() <= limit));
        assert!(w.data().iter().any(|&x| x != 0.0));
    }

    #[test]
    fn checkpoint_round_trip() {
        let nde = Nde::init(NdeConfig::new(3, 2).unwrap(), &mut seeded(8)).unwrap();
        let json = serde_json::to_string(&nde.to_checkpoint("copying")).unwrap();
        let back: NdeCheckpoint = serde_json::from_str(&json).unwrap();
        assert_eq!(back.model, "copying");
        let restored = Nde::from_checkpoint(&back).unwrap();
        assert_eq!(restored.store(), nde.store());
        let mut wrong = back.clone();
        wrong.version = 99;
        assert!(Nde::from_checkpoint(&wrong).is_err());
        let mut wrong = back;
        wrong.config.gin_layers = 1;
        wrong.config.width = 4;
        assert!(Nde::from_checkpoint(&wrong).is_err());
    }

    #[test]
    fn gradients_match_central_differences() {
        for p in 1..=2 {
            let kind = if p == 1 { ModelKind::Redirection } else { ModelKind::DuplicationMutation };
            let data = sample_graphs(kind, 3, 12, 21);
            for ell in 0..=5 {
                let mut nde = Nde::init(NdeConfig::new(ell, p).unwrap(), &mut seeded(ell as u64 + 10)).unwrap();
                let worst = gradient_check(&mut nde, &data);
                assert!(worst < 1e-5, "ell={ell} p={p}: {worst}");
            }
        }
    }

    fn gradient_check(nde: &mut Nde, data: &[(Vec<f64>, Graph)]) -> f64 {
        let ell = nde.config().gin_layers;
        let encs: Vec<_> = data.iter().map(|(_, g)| GraphEncoding::compressed(g, ell).unwrap()).collect();
        let batch = Batch::new(&encs.iter().collect::<Vec<_>>(), ell).unwrap();
        let p = data[0].0.len();
        let theta = Tensor::new(data.len(), p, data.iter().flat_map(|(t, _)| t.clone()).collect()).unwrap();
        let loss_of = |nde: &Nde| {
            let (mut tape, bound) = tape_with(nde);
            let conc = nde.forward(&mut tape, &bound, &batch).unwrap();
            let loss = nll_loss(&mut tape, conc, &theta).unwrap();
            (tape, loss)
        };
        let (tape, loss) = loss_of(nde);
        tape.backward(loss, nde.store_mut()).unwrap();
        let ids: Vec<_> = nde.store().ids().collect();
        let h = 1e-6;
        let mut worst: f64 = 0.0;
        for id in ids {
            let analytic = nde.store().grad(id).clone();
            for k in 0..analytic.len() {
                let x0 = nde.store().value(id).data()[k];
                nde.store_mut().value_mut(id).data_mut()[k] = x0 + h;
                let (t, l) = loss_of(nde);
                let up = t.value(l).item();
                nde.store_mut().value_mut(id).data_mut()[k] = x0 - h;
                let (t, l) = loss_of(nde);
                let down = t.value(l).item();
                nde.store_mut().value_mut(id).data_mut()[k] = x0;
                let numeric = (up - down) / (2.0 * h);
                let a = analytic.data()[k];
                worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3));
            }
        }
        worst
    }

    #[test]
    fn small_world_construction_reproduces_posterior() {
        let spec = registry(ModelKind::ConnectedSmallWorld);
        let nde = small_world_network(200, 4, 1, 1e-4).unwrap();
        let mut rng = seeded(31);
        let mut thetas: Vec<f64> = (0..40).map(|_| spec.sample_prior(&mut rng).0[0]).collect();
        // include the extremes where softplus is far from linear
        thetas.extend([1e-12, 0.002, 0.005, 0.995, 0.998, 1.0 - 1e-12]);
        for theta in thetas {
            let (g, _) = simulate(&spec, &ModelParams(vec![theta]), 200, &mut rng).unwrap();
            let exact = posterior_connected_small_world(&g, 4).unwrap();
            let approx = nde.posterior(&g).unwrap();
            for (a, e) in [(approx.alpha[0], exact.alpha[0]), (approx.beta[0], exact.beta[0])] {
                assert!((a - e).abs() / e < 5e-3, "theta={theta}: {a} vs {e}");
            }
        }
    }
}
