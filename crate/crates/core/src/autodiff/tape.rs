//! Tape-based reverse-mode differentiation over dense matrices.
//!
//! Every primitive records its inputs and output on a [`Tape`]; [`Tape::backward`]
//! walks the record in reverse and accumulates vector-Jacobian products into the
//! gradient slots of a [`ParamStore`].

use std::sync::Arc;

use super::params::{ParamId, ParamStore};
use super::special::{digamma, lgamma, trigamma};
use super::tensor::{SparseMatrix, Segments, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Constant,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, Var),
    BroadcastCols(Var, usize),
    AddScalar(Var, f64),
    MulScalar(Var, f64),
    Tanh(Var),
    Softplus(Var),
    Log(Var),
    Lgamma(Var),
    Digamma(Var),
    SparseAggregate(Arc<SparseMatrix>, Var),
    GatherRows(Arc<Vec<usize>>, Var),
    SegmentMean(Arc<Segments>, Var),
    ConcatRows(Vec<Var>),
    SelectCols(Var, Vec<usize>),
    Sum(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Constant => "constant",
            Op::Param(_) => "param",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_bias_row",
            Op::Scale(..) => "scale",
            Op::BroadcastCols(..) => "broadcast_cols",
            Op::AddScalar(..) => "add_scalar",
            Op::MulScalar(..) => "mul_scalar",
            Op::Tanh(_) => "tanh",
            Op::Softplus(_) => "softplus",
            Op::Log(_) => "log",
            Op::Lgamma(_) => "lgamma",
            Op::Digamma(_) => "digamma",
            Op::SparseAggregate(..) => "sparse_aggregate",
            Op::GatherRows(..) => "gather_rows",
            Op::SegmentMean(..) => "segment_mean",
            Op::ConcatRows(_) => "concat_rows",
            Op::SelectCols(..) => "select_cols",
            Op::Sum(_) => "sum",
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Tensor,
}

/// `log(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, op: Op) -> Result<Var> {
        let value = self.eval(&op)?;
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        self.nodes.push(Node { op, value });
        Ok(Var(self.nodes.len() - 1))
    }

    /// A value that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            op: Op::Constant,
            value,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records the current value of a parameter.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.nodes.push(Node {
            op: Op::Param(id),
            value: store.value(id).clone(),
        });
        Var(self.nodes.len() - 1)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a).1 != self.shape(b).0 {
            return Err(Error::shape(
                "matmul",
                format!("{:?} x {:?}", self.shape(a), self.shape(b)),
            ));
        }
        self.push(Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        self.push(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        self.push(Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        self.push(Op::Mul(a, b))
    }

    /// Adds the `1 x c` row `bias` to every row of `x`.
    pub fn add_bias_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xs, bs) = (self.shape(x), self.shape(bias));
        if bs.0 != 1 || bs.1 != xs.1 {
            return Err(Error::shape("add_bias_row", format!("{xs:?} + {bs:?}")));
        }
        self.push(Op::AddRow(x, bias))
    }

    /// Multiplies `x` by the `1 x 1` value `s`.
    pub fn scale(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.shape(s) != (1, 1) {
            return Err(Error::shape("scale", format!("factor shape {:?}", self.shape(s))));
        }
        self.push(Op::Scale(x, s))
    }

    /// Repeats a single column `cols` times.
    pub fn broadcast_cols(&mut self, x: Var, cols: usize) -> Result<Var> {
        if self.shape(x).1 != 1 {
            return Err(Error::shape(
                "broadcast_cols",
                format!("input {:?} is not a column", self.shape(x)),
            ));
        }
        self.push(Op::BroadcastCols(x, cols))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        self.push(Op::AddScalar(x, c))
    }

    pub fn mul_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        self.push(Op::MulScalar(x, c))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.push(Op::Tanh(x))
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        self.push(Op::Softplus(x))
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.push(Op::Log(x))
    }

    pub fn lgamma(&mut self, x: Var) -> Result<Var> {
        self.push(Op::Lgamma(x))
    }

    pub fn digamma(&mut self, x: Var) -> Result<Var> {
        self.push(Op::Digamma(x))
    }

    /// `Ã · H` for a sparse (weighted) aggregation operator.
    pub fn sparse_aggregate(&mut self, a: Arc<SparseMatrix>, h: Var) -> Result<Var> {
        if a.cols() != self.shape(h).0 {
            return Err(Error::shape(
                "sparse_aggregate",
                format!("operator has {} columns, features have {} rows", a.cols(), self.shape(h).0),
            ));
        }
        self.push(Op::SparseAggregate(a, h))
    }

    /// Row `r` of the output is row `index[r]` of `x`.
    pub fn gather_rows(&mut self, index: Arc<Vec<usize>>, x: Var) -> Result<Var> {
        let rows = self.shape(x).0;
        if index.iter().any(|&i| i >= rows) {
            return Err(Error::shape("gather_rows", format!("index out of range for {rows} rows")));
        }
        self.push(Op::GatherRows(index, x))
    }

    /// Weighted per-segment sums (means with uniform weights).
    pub fn segment_mean(&mut self, segments: Arc<Segments>, x: Var) -> Result<Var> {
        if segments.len() != self.shape(x).0 {
            return Err(Error::shape(
                "segment_mean",
                format!("{} memberships for {} rows", segments.len(), self.shape(x).0),
            ));
        }
        self.push(Op::SegmentMean(segments, x))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = parts
            .first()
            .map(|&p| self.shape(p).1)
            .ok_or_else(|| Error::shape("concat_rows", "no inputs"))?;
        if parts.iter().any(|&p| self.shape(p).1 != cols) {
            return Err(Error::shape("concat_rows", "column counts differ"));
        }
        self.push(Op::ConcatRows(parts.to_vec()))
    }

    pub fn select_cols(&mut self, x: Var, cols: Vec<usize>) -> Result<Var> {
        let width = self.shape(x).1;
        if cols.iter().any(|&c| c >= width) {
            return Err(Error::shape("select_cols", format!("column out of range for width {width}")));
        }
        self.push(Op::SelectCols(x, cols))
    }

    /// Sum of all entries as a `1 x 1` value.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.push(Op::Sum(x))
    }

    fn eval(&self, op: &Op) -> Result<Tensor> {
        let v = |x: &Var| &self.nodes[x.0].value;
        Ok(match op {
            Op::Constant | Op::Param(_) => {
                return Err(Error::shape("eval", "leaf values are not recomputed"))
            }
            Op::MatMul(a, b) => v(a).matmul(v(b)),
            Op::Add(a, b) => v(a).zip_map(v(b), |x, y| x + y),
            Op::Sub(a, b) => v(a).zip_map(v(b), |x, y| x - y),
            Op::Mul(a, b) => v(a).zip_map(v(b), |x, y| x * y),
            Op::AddRow(x, b) => {
                let (x, b) = (v(x), v(b).data());
                let mut out = x.clone();
                let cols = x.cols();
                for (i, o) in out.data_mut().iter_mut().enumerate() {
                    *o += b[i % cols];
                }
                out
            }
            Op::Scale(x, s) => {
                let s = v(s).item();
                v(x).map(|e| s * e)
            }
            Op::BroadcastCols(x, cols) => {
                let x = v(x);
                let mut data = Vec::with_capacity(x.rows() * cols);
                for &e in x.data() {
                    data.extend(std::iter::repeat_n(e, *cols));
                }
                Tensor::new(x.rows(), *cols, data)?
            }
            Op::AddScalar(x, c) => v(x).map(|e| e + c),
            Op::MulScalar(x, c) => v(x).map(|e| e * c),
            Op::Tanh(x) => v(x).map(f64::tanh),
            Op::Softplus(x) => v(x).map(softplus),
            Op::Log(x) => v(x).map(f64::ln),
            Op::Lgamma(x) => v(x).map(lgamma),
            Op::Digamma(x) => v(x).map(digamma),
            Op::SparseAggregate(a, h) => a.apply(v(h)),
            Op::GatherRows(index, x) => {
                let x = v(x);
                let mut data = Vec::with_capacity(index.len() * x.cols());
                for &i in index.iter() {
                    data.extend_from_slice(x.row_slice(i));
                }
                Tensor::new(index.len(), x.cols(), data)?
            }
            Op::SegmentMean(seg, x) => seg.reduce(v(x)),
            Op::ConcatRows(parts) => {
                let cols = v(&parts[0]).cols();
                let mut data = Vec::new();
                for p in parts {
                    data.extend_from_slice(v(p).data());
                }
                let rows = data.len() / cols.max(1);
                Tensor::new(rows, cols, data)?
            }
            Op::SelectCols(x, cols) => {
                let x = v(x);
                let mut data = Vec::with_capacity(x.rows() * cols.len());
                for r in 0..x.rows() {
                    let row = x.row_slice(r);
                    data.extend(cols.iter().map(|&c| row[c]));
                }
                Tensor::new(x.rows(), cols.len(), data)?
            }
            Op::Sum(x) => Tensor::scalar(v(x).sum()),
        })
    }

    /// Recomputes every non-leaf value from the recorded inputs.
    pub fn replay(&self) -> Result<Vec<Tensor>> {
        let mut replayed = Tape {
            nodes: Vec::with_capacity(self.nodes.len()),
        };
        for node in &self.nodes {
            let value = match node.op {
                Op::Constant | Op::Param(_) => node.value.clone(),
                _ => replayed.eval(&node.op)?,
            };
            replayed.nodes.push(Node {
                op: node.op.clone(),
                value,
            });
        }
        Ok(replayed.nodes.into_iter().map(|n| n.value).collect())
    }

    /// Gradient of the scalar `loss` with respect to every recorded value.
    pub fn gradients(&self, loss: Var) -> Result<Vec<Option<Tensor>>> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::shape("backward", "loss is not on this tape"));
        }
        if self.shape(loss) != (1, 1) {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got {:?}", self.shape(loss)),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::scalar(1.0));

        fn acc(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot => *slot = Some(g),
            }
        }

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            let val = |x: &Var| &self.nodes[x.0].value;
            match &node.op {
                Op::Constant | Op::Param(_) => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    acc(&mut grads, *a, g.matmul_transposed(val(b)));
                    acc(&mut grads, *b, val(a).transposed_matmul(&g));
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *b, g.map(|e| -e));
                    acc(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    acc(&mut grads, *a, g.zip_map(val(b), |x, y| x * y));
                    acc(&mut grads, *b, g.zip_map(val(a), |x, y| x * y));
                }
                Op::AddRow(x, b) => {
                    acc(&mut grads, *b, g.sum_rows());
                    acc(&mut grads, *x, g);
                }
                Op::Scale(x, s) => {
                    let ds: f64 = g.data().iter().zip(val(x).data()).map(|(a, b)| a * b).sum();
                    let sv = val(s).item();
                    acc(&mut grads, *s, Tensor::scalar(ds));
                    acc(&mut grads, *x, g.map(|e| e * sv));
                }
                Op::BroadcastCols(x, cols) => {
                    let data = g
                        .data()
                        .chunks(*cols)
                        .map(|row| row.iter().sum())
                        .collect();
                    acc(&mut grads, *x, Tensor::column(data));
                }
                Op::AddScalar(x, _) => acc(&mut grads, *x, g),
                Op::MulScalar(x, c) => acc(&mut grads, *x, g.map(|e| e * c)),
                Op::Tanh(x) => {
                    acc(&mut grads, *x, g.zip_map(&node.value, |gi, y| gi * (1.0 - y * y)));
                }
                Op::Softplus(x) => {
                    acc(&mut grads, *x, g.zip_map(val(x), |gi, xi| gi * sigmoid(xi)));
                }
                Op::Log(x) => acc(&mut grads, *x, g.zip_map(val(x), |gi, xi| gi / xi)),
                Op::Lgamma(x) => acc(&mut grads, *x, g.zip_map(val(x), |gi, xi| gi * digamma(xi))),
                Op::Digamma(x) => {
                    acc(&mut grads, *x, g.zip_map(val(x), |gi, xi| gi * trigamma(xi)))
                }
                Op::SparseAggregate(a, h) => acc(&mut grads, *h, a.apply_transposed(&g)),
                Op::GatherRows(index, x) => {
                    let (rows, cols) = val(x).shape();
                    let mut out = Tensor::zeros(rows, cols);
                    for (r, &i) in index.iter().enumerate() {
                        let src = g.row_slice(r);
                        let dst = &mut out.data_mut()[i * cols..(i + 1) * cols];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                    acc(&mut grads, *x, out);
                }
                Op::SegmentMean(seg, x) => {
                    let (rows, cols) = val(x).shape();
                    let mut out = Tensor::zeros(rows, cols);
                    for r in 0..rows {
                        let w = seg.weight_of(r);
                        let src = g.row_slice(seg.segment_of(r));
                        let dst = &mut out.data_mut()[r * cols..(r + 1) * cols];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d = w * s;
                        }
                    }
                    acc(&mut grads, *x, out);
                }
                Op::ConcatRows(parts) => {
                    let cols = g.cols();
                    let mut offset = 0;
                    for p in parts {
                        let rows = val(p).rows();
                        let data = g.data()[offset * cols..(offset + rows) * cols].to_vec();
                        offset += rows;
                        acc(&mut grads, *p, Tensor::new(rows, cols, data)?);
                    }
                }
                Op::SelectCols(x, cols) => {
                    let (rows, width) = val(x).shape();
                    let mut out = Tensor::zeros(rows, width);
                    for r in 0..rows {
                        for (j, &c) in cols.iter().enumerate() {
                            let cur = out.get(r, c);
                            out.set(r, c, cur + g.get(r, j));
                        }
                    }
                    acc(&mut grads, *x, out);
                }
                Op::Sum(x) => {
                    let (rows, cols) = val(x).shape();
                    acc(&mut grads, *x, Tensor::full(rows, cols, g.item()));
                }
            }
        }
        Ok(grads)
    }

    /// Zeroes the store's gradients and fills them with d loss / d parameter.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<()> {
        let grads = self.gradients(loss)?;
        store.zero_grad();
        for (idx, g) in grads.into_iter().enumerate() {
            if let (Op::Param(id), Some(g)) = (&self.nodes[idx].op, g) {
                store.grad_mut(*id).add_assign(&g);
            }
        }
        Ok(())
    }
}
