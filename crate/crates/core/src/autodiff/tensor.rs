use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major matrix of `f64`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(
                "tensor",
                format!("{} values for shape {rows}x{cols}", data.len()),
            ));
        }
        Ok(Tensor { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor::full(rows, cols, 0.0)
    }

    pub fn full(rows: usize, cols: usize, value: f64) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor::full(1, 1, value)
    }

    pub fn column(values: Vec<f64>) -> Self {
        Tensor {
            rows: values.len(),
            cols: 1,
            data: values,
        }
    }

    pub fn row(values: Vec<f64>) -> Self {
        Tensor {
            rows: 1,
            cols: values.len(),
            data: values,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, value: f64) {
        self.data[r * self.cols + c] = value;
    }

    pub fn row_slice(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// The single value of a 1x1 tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        debug_assert_eq!(self.shape(), other.shape());
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    /// `self += other`, same shape.
    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn fill(&mut self, value: f64) {
        self.data.iter_mut().for_each(|v| *v = value);
    }

    /// `self · other`.
    pub fn matmul(&self, other: &Tensor) -> Tensor {
        debug_assert_eq!(self.cols, other.rows);
        let (n, k, m) = (self.rows, self.cols, other.cols);
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let a = &self.data[i * k..(i + 1) * k];
            let o = &mut out[i * m..(i + 1) * m];
            for (p, &aip) in a.iter().enumerate() {
                if aip == 0.0 {
                    continue;
                }
                let b = &other.data[p * m..(p + 1) * m];
                for (oj, &bj) in o.iter_mut().zip(b) {
                    *oj += aip * bj;
                }
            }
        }
        Tensor {
            rows: n,
            cols: m,
            data: out,
        }
    }

    /// `self · otherᵀ`.
    pub fn matmul_transposed(&self, other: &Tensor) -> Tensor {
        debug_assert_eq!(self.cols, other.cols);
        let (n, k, m) = (self.rows, self.cols, other.rows);
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let a = &self.data[i * k..(i + 1) * k];
            for j in 0..m {
                let b = &other.data[j * k..(j + 1) * k];
                out[i * m + j] = a.iter().zip(b).map(|(x, y)| x * y).sum();
            }
        }
        Tensor {
            rows: n,
            cols: m,
            data: out,
        }
    }

    /// `selfᵀ · other`.
    pub fn transposed_matmul(&self, other: &Tensor) -> Tensor {
        debug_assert_eq!(self.rows, other.rows);
        let (n, k, m) = (self.rows, self.cols, other.cols);
        let mut out = vec![0.0; k * m];
        for i in 0..n {
            let a = &self.data[i * k..(i + 1) * k];
            let b = &other.data[i * m..(i + 1) * m];
            for (p, &aip) in a.iter().enumerate() {
                if aip == 0.0 {
                    continue;
                }
                let o = &mut out[p * m..(p + 1) * m];
                for (oj, &bj) in o.iter_mut().zip(b) {
                    *oj += aip * bj;
                }
            }
        }
        Tensor {
            rows: k,
            cols: m,
            data: out,
        }
    }

    /// Column sums as a `1 x cols` tensor.
    pub fn sum_rows(&self) -> Tensor {
        let mut out = vec![0.0; self.cols];
        for r in 0..self.rows {
            for (o, v) in out.iter_mut().zip(self.row_slice(r)) {
                *o += v;
            }
        }
        Tensor::row(out)
    }

    pub fn sum(&self) -> f64 {
        neumaier_sum(self.data.iter().copied())
    }
}

/// Compensated (Neumaier) summation.
pub fn neumaier_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut acc = CompensatedSum::default();
    for v in values {
        acc.add(v);
    }
    acc.value()
}

#[derive(Clone, Copy, Debug, Default)]
pub struct CompensatedSum {
    sum: f64,
    compensation: f64,
}

impl CompensatedSum {
    pub fn add(&mut self, v: f64) {
        let t = self.sum + v;
        if self.sum.abs() >= v.abs() {
            self.compensation += (self.sum - t) + v;
        } else {
            self.compensation += (v - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.compensation
    }
}

/// Row-compressed sparse matrix with explicit weights.
///
/// Used for the self-loop-augmented adjacency `Ã` of a (block-batched) graph,
/// and for its weighted quotient under colour refinement.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseMatrix {
    rows: usize,
    cols: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    weights: Vec<f64>,
}

impl SparseMatrix {
    /// Builds from per-row `(column, weight)` entries.
    pub fn from_rows(cols: usize, rows: &[Vec<(usize, f64)>]) -> Result<Self> {
        let mut indptr = Vec::with_capacity(rows.len() + 1);
        let mut indices = Vec::new();
        let mut weights = Vec::new();
        indptr.push(0);
        for row in rows {
            for &(c, w) in row {
                if c >= cols {
                    return Err(Error::shape(
                        "sparse_matrix",
                        format!("column {c} out of range for {cols} columns"),
                    ));
                }
                indices.push(c);
                weights.push(w);
            }
            indptr.push(indices.len());
        }
        Ok(SparseMatrix {
            rows: rows.len(),
            cols,
            indptr,
            indices,
            weights,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.indptr[r]..self.indptr[r + 1];
        self.indices[span.clone()]
            .iter()
            .copied()
            .zip(self.weights[span].iter().copied())
    }

    /// `self · x`.
    pub fn apply(&self, x: &Tensor) -> Tensor {
        debug_assert_eq!(self.cols, x.rows());
        let w = x.cols();
        let mut out = Tensor::zeros(self.rows, w);
        for r in 0..self.rows {
            let o = &mut out.data[r * w..(r + 1) * w];
            for (c, weight) in self.row(r) {
                let xr = &x.data[c * w..(c + 1) * w];
                for (oj, &xj) in o.iter_mut().zip(xr) {
                    *oj += weight * xj;
                }
            }
        }
        out
    }

    /// `selfᵀ · g`.
    pub fn apply_transposed(&self, g: &Tensor) -> Tensor {
        debug_assert_eq!(self.rows, g.rows());
        let w = g.cols();
        let mut out = Tensor::zeros(self.cols, w);
        for r in 0..self.rows {
            let gr = &g.data[r * w..(r + 1) * w];
            for (c, weight) in self.row(r) {
                let o = &mut out.data[c * w..(c + 1) * w];
                for (oj, &gj) in o.iter_mut().zip(gr) {
                    *oj += weight * gj;
                }
            }
        }
        out
    }
}

/// Assignment of rows to segments (graphs in a batch) with per-row weights.
///
/// A plain segment mean uses weight `1 / size` for every row of a segment.
#[derive(Clone, Debug, PartialEq)]
pub struct Segments {
    count: usize,
    segment: Vec<usize>,
    weight: Vec<f64>,
}

impl Segments {
    pub fn new(count: usize, segment: Vec<usize>, weight: Vec<f64>) -> Result<Self> {
        if segment.len() != weight.len() {
            return Err(Error::shape("segments", "segment and weight lengths differ"));
        }
        if let Some(&s) = segment.iter().find(|&&s| s >= count) {
            return Err(Error::shape(
                "segments",
                format!("segment id {s} out of range for {count} segments"),
            ));
        }
        Ok(Segments {
            count,
            segment,
            weight,
        })
    }

    /// Uniform weights `1 / |segment|`.
    pub fn mean(membership: Vec<usize>) -> Result<Self> {
        let count = membership.iter().max().map_or(0, |&m| m + 1);
        let mut sizes = vec![0usize; count];
        for &m in &membership {
            sizes[m] += 1;
        }
        let weight = membership.iter().map(|&m| 1.0 / sizes[m] as f64).collect();
        Segments::new(count, membership, weight)
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn len(&self) -> usize {
        self.segment.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segment.is_empty()
    }

    pub fn segment_of(&self, row: usize) -> usize {
        self.segment[row]
    }

    pub fn weight_of(&self, row: usize) -> f64 {
        self.weight[row]
    }

    /// Weighted per-segment sums of the rows of `x`, compensated.
    pub fn reduce(&self, x: &Tensor) -> Tensor {
        let w = x.cols();
        let mut acc = vec![CompensatedSum::default(); self.count * w];
        for r in 0..x.rows() {
            let s = self.segment[r];
            let weight = self.weight[r];
            for (a, &v) in acc[s * w..(s + 1) * w].iter_mut().zip(x.row_slice(r)) {
                a.add(weight * v);
            }
        }
        Tensor {
            rows: self.count,
            cols: w,
            data: acc.iter().map(CompensatedSum::value).collect(),
        }
    }
}
