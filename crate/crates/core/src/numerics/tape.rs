//! Tape-based reverse-mode differentiation over 2-D tensors.
//!
//! Every op appends a node holding its forward value and the handles it
//! read. [`Tape::backward`] walks the nodes in reverse and pushes the
//! upstream gradient into each input, so every leaf that requires a gradient
//! receives exactly one accumulated result.

use super::tensor::{sigmoid, softplus, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    Sigmoid(Var),
    Tanh(Var),
    Gelu(Var),
    Exp(Var),
    Ln(Var),
    Softplus(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    LayerNorm { x: Var, inv_std: Vec<f64> },
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    SliceRows { x: Var, start: usize },
    ConcatRows(Vec<Var>),
    GatherRows { table: Var, ids: Vec<usize> },
    Cumsum { x: Var, exclusive: bool },
    Sum(Var),
    Mean(Var),
    PickCols { x: Var, idx: Vec<usize> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

#[derive(Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    checked: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

impl Tape {
    /// A tape in checked mode: every op output is scanned for NaN/Inf.
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            checked: true,
        }
    }

    pub fn with_checks(checked: bool) -> Self {
        Tape {
            nodes: Vec::new(),
            checked,
        }
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a leaf. Leaves must be 2-D.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var> {
        value.expect_2d("leaf")?;
        if self.checked && !value.is_finite() {
            return Err(Error::NonFinite { op: "leaf" });
        }
        Ok(self.push_raw(value, Op::Leaf, requires_grad))
    }

    /// Records a non-trainable leaf.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, false)
    }

    fn push_raw(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if self.checked && !value.is_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push_raw(value, op, rg))
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        let s = self.nodes[v.0].value.shape();
        (s[0], s[1])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        self.push("matmul", value, Op::Matmul(a, b), &[a, b])
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).transpose()?;
        self.push("transpose", value, Op::Transpose(x), &[x])
    }

    fn zip_same(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::dim(name, ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_same("add", a, b, |x, y| x + y)?;
        self.push("add", value, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_same("sub", a, b, |x, y| x - y)?;
        self.push("sub", value, Op::Sub(a, b), &[a, b])
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_same("mul", a, b, |x, y| x * y)?;
        self.push("mul", value, Op::Mul(a, b), &[a, b])
    }

    /// Adds a `1 × n` row to every row of an `m × n` matrix.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (m, n) = self.dims(x);
        if self.dims(row) != (1, n) {
            return Err(Error::dim("add_row", self.shape(x), self.shape(row)));
        }
        let r = self.value(row).data().to_vec();
        let mut data = self.value(x).data().to_vec();
        for i in 0..m {
            for (d, rv) in data[i * n..(i + 1) * n].iter_mut().zip(&r) {
                *d += rv;
            }
        }
        let value = Tensor::matrix(m, n, data)?;
        self.push("add_row", value, Op::AddRow(x, row), &[x, row])
    }

    /// Scales row `i` of an `m × n` matrix by entry `i` of an `m × 1` column.
    pub fn mul_col(&mut self, x: Var, col: Var) -> Result<Var> {
        let (m, n) = self.dims(x);
        if self.dims(col) != (m, 1) {
            return Err(Error::dim("mul_col", self.shape(x), self.shape(col)));
        }
        let c = self.value(col).data().to_vec();
        let mut data = self.value(x).data().to_vec();
        for i in 0..m {
            for d in &mut data[i * n..(i + 1) * n] {
                *d *= c[i];
            }
        }
        let value = Tensor::matrix(m, n, data)?;
        self.push("mul_col", value, Op::MulCol(x, col), &[x, col])
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let value = self.value(x).map(|v| v * s);
        self.push("scale", value, Op::Scale(x, s), &[x])
    }

    pub fn add_const(&mut self, x: Var, c: f64) -> Result<Var> {
        let value = self.value(x).map(|v| v + c);
        self.push("add_const", value, Op::AddConst(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(sigmoid);
        self.push("sigmoid", value, Op::Sigmoid(x), &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(f64::tanh);
        self.push("tanh", value, Op::Tanh(x), &[x])
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(gelu);
        self.push("gelu", value, Op::Gelu(x), &[x])
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(f64::exp);
        self.push("exp", value, Op::Exp(x), &[x])
    }

    pub fn ln(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(f64::ln);
        self.push("ln", value, Op::Ln(x), &[x])
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(softplus);
        self.push("softplus", value, Op::Softplus(x), &[x])
    }

    /// Row-wise softmax. Entries where `mask` is false get exactly zero weight.
    pub fn softmax_rows(&mut self, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        let (m, n) = self.dims(x);
        if n == 0 {
            return Err(Error::EmptyAxis { op: "softmax_rows" });
        }
        if let Some(mask) = mask {
            if mask.len() != m * n {
                return Err(Error::dim("softmax_rows mask", &[m, n], &[mask.len()]));
            }
        }
        let src = self.value(x).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &src[i * n..(i + 1) * n];
            let vis = |j: usize| mask.is_none_or(|mk| mk[i * n + j]);
            let max = (0..n)
                .filter(|&j| vis(j))
                .map(|j| row[j])
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(Error::FullyMaskedRow { row: i });
            }
            let mut sum = 0.0;
            for j in 0..n {
                if vis(j) {
                    let e = (row[j] - max).exp();
                    out[i * n + j] = e;
                    sum += e;
                }
            }
            for v in &mut out[i * n..(i + 1) * n] {
                *v /= sum;
            }
        }
        let value = Tensor::matrix(m, n, out)?;
        self.push("softmax_rows", value, Op::SoftmaxRows(x), &[x])
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.dims(x);
        if n == 0 {
            return Err(Error::EmptyAxis { op: "log_softmax_rows" });
        }
        let src = self.value(x).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &src[i * n..(i + 1) * n];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for j in 0..n {
                out[i * n + j] = row[j] - lse;
            }
        }
        let value = Tensor::matrix(m, n, out)?;
        self.push("log_softmax_rows", value, Op::LogSoftmaxRows(x), &[x])
    }

    /// Normalises each row to zero mean and unit variance (no affine part).
    pub fn layer_norm_rows(&mut self, x: Var, eps: f64) -> Result<Var> {
        let (m, n) = self.dims(x);
        if n == 0 {
            return Err(Error::EmptyAxis { op: "layer_norm_rows" });
        }
        let src = self.value(x).data();
        let mut out = vec![0.0; m * n];
        let mut inv_std = Vec::with_capacity(m);
        for i in 0..m {
            let row = &src[i * n..(i + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            for j in 0..n {
                out[i * n + j] = (row[j] - mean) * is;
            }
            inv_std.push(is);
        }
        let value = Tensor::matrix(m, n, out)?;
        self.push("layer_norm_rows", value, Op::LayerNorm { x, inv_std }, &[x])
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims(x);
        if start + len > n {
            return Err(Error::dim("slice_cols", &[m, n], &[start, len]));
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(m * len);
        for i in 0..m {
            data.extend_from_slice(&src[i * n + start..i * n + start + len]);
        }
        let value = Tensor::matrix(m, len, data)?;
        self.push("slice_cols", value, Op::SliceCols { x, start }, &[x])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(Error::EmptyInput("concat_cols"))?;
        let m = self.dims(first).0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pm, pn) = self.dims(p);
            if pm != m {
                return Err(Error::dim("concat_cols", self.shape(first), self.shape(p)));
            }
            widths.push(pn);
        }
        let n: usize = widths.iter().sum();
        let mut data = vec![0.0; m * n];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = self.value(p).data();
            for i in 0..m {
                data[i * n + off..i * n + off + w].copy_from_slice(&src[i * w..(i + 1) * w]);
            }
            off += w;
        }
        let value = Tensor::matrix(m, n, data)?;
        self.push("concat_cols", value, Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims(x);
        if start + len > m {
            return Err(Error::dim("slice_rows", &[m, n], &[start, len]));
        }
        let data = self.value(x).data()[start * n..(start + len) * n].to_vec();
        let value = Tensor::matrix(len, n, data)?;
        self.push("slice_rows", value, Op::SliceRows { x, start }, &[x])
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(Error::EmptyInput("concat_rows"))?;
        let n = self.dims(first).1;
        let mut data = Vec::new();
        let mut m = 0;
        for &p in parts {
            let (pm, pn) = self.dims(p);
            if pn != n {
                return Err(Error::dim("concat_rows", self.shape(first), self.shape(p)));
            }
            data.extend_from_slice(self.value(p).data());
            m += pm;
        }
        let value = Tensor::matrix(m, n, data)?;
        self.push("concat_rows", value, Op::ConcatRows(parts.to_vec()), parts)
    }

    /// Row lookup: output row `r` is `table[ids[r]]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (m, n) = self.dims(table);
        let src = self.value(table).data();
        let mut data = Vec::with_capacity(ids.len() * n);
        for &id in ids {
            if id >= m {
                return Err(Error::Vocabulary { id, size: m });
            }
            data.extend_from_slice(&src[id * n..(id + 1) * n]);
        }
        let value = Tensor::matrix(ids.len(), n, data)?;
        self.push(
            "gather_rows",
            value,
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        )
    }

    /// Running sum down the rows. With `exclusive`, row `j` sums rows `< j`.
    pub fn cumsum_rows(&mut self, x: Var, exclusive: bool) -> Result<Var> {
        let (m, n) = self.dims(x);
        let src = self.value(x).data();
        let mut data = vec![0.0; m * n];
        let mut acc = vec![0.0; n];
        for i in 0..m {
            let row = &src[i * n..(i + 1) * n];
            if exclusive {
                data[i * n..(i + 1) * n].copy_from_slice(&acc);
                acc.iter_mut().zip(row).for_each(|(a, v)| *a += v);
            } else {
                acc.iter_mut().zip(row).for_each(|(a, v)| *a += v);
                data[i * n..(i + 1) * n].copy_from_slice(&acc);
            }
        }
        let value = Tensor::matrix(m, n, data)?;
        self.push("cumsum_rows", value, Op::Cumsum { x, exclusive }, &[x])
    }

    /// Sum of all entries as a `1 × 1` tensor.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.is_empty() {
            return Err(Error::EmptyAxis { op: "mean" });
        }
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        self.push("mean", Tensor::scalar(s), Op::Mean(x), &[x])
    }

    /// Picks entry `idx[r]` from each row `r`, giving an `m × 1` column.
    pub fn pick_cols(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (m, n) = self.dims(x);
        if idx.len() != m {
            return Err(Error::dim("pick_cols", &[m, n], &[idx.len()]));
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(m);
        for (r, &c) in idx.iter().enumerate() {
            if c >= n {
                return Err(Error::Vocabulary { id: c, size: n });
            }
            data.push(src[r * n + c]);
        }
        let value = Tensor::column(data);
        self.push(
            "pick_cols",
            value,
            Op::PickCols {
                x,
                idx: idx.to_vec(),
            },
            &[x],
        )
    }

    /// Reverse sweep from a `1 × 1` output.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let out_shape = self.shape(output);
        if out_shape != [1, 1] {
            return Err(Error::dim("backward", out_shape, &[1, 1]));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; output.0 + 1];
        grads[output.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        // Only leaves keep their gradient; intermediates are dropped.
        for (i, g) in grads.iter_mut().enumerate() {
            if !matches!(self.nodes[i].op, Op::Leaf) {
                *g = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn backprop(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                if self.requires_grad(*a) {
                    let ga = g.matmul(&self.value(*b).transpose()?)?;
                    self.acc(grads, *a, ga);
                }
                if self.requires_grad(*b) {
                    let gb = self.value(*a).transpose()?.matmul(g)?;
                    self.acc(grads, *b, gb);
                }
            }
            Op::Transpose(x) => self.acc(grads, *x, g.transpose()?),
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                self.acc(grads, *a, zip(g, vb, |x, y| x * y));
                self.acc(grads, *b, zip(g, va, |x, y| x * y));
            }
            Op::AddRow(x, row) => {
                self.acc(grads, *x, g.clone());
                if self.requires_grad(*row) {
                    let (m, n) = (g.rows(), g.cols());
                    let mut s = vec![0.0; n];
                    for i in 0..m {
                        s.iter_mut().zip(g.row_slice(i)).for_each(|(a, v)| *a += v);
                    }
                    self.acc(grads, *row, Tensor::row(s));
                }
            }
            Op::MulCol(x, col) => {
                let (m, n) = (g.rows(), g.cols());
                let c = self.value(*col).data();
                let xv = self.value(*x);
                if self.requires_grad(*x) {
                    let mut gx = g.clone();
                    for (row, &ci) in gx.data_mut().chunks_mut(n.max(1)).zip(c) {
                        row.iter_mut().for_each(|v| *v *= ci);
                    }
                    self.acc(grads, *x, gx);
                }
                if self.requires_grad(*col) {
                    let gc = (0..m)
                        .map(|i| super::tensor::dot(g.row_slice(i), xv.row_slice(i)))
                        .collect();
                    self.acc(grads, *col, Tensor::column(gc));
                }
            }
            Op::Scale(x, s) => self.acc(grads, *x, g.map(|v| v * s)),
            Op::AddConst(x) => self.acc(grads, *x, g.clone()),
            Op::Sigmoid(x) => self.acc(grads, *x, zip(g, y, |gv, yv| gv * yv * (1.0 - yv))),
            Op::Tanh(x) => self.acc(grads, *x, zip(g, y, |gv, yv| gv * (1.0 - yv * yv))),
            Op::Gelu(x) => self.acc(grads, *x, zip(g, self.value(*x), |gv, xv| gv * gelu_grad(xv))),
            Op::Exp(x) => self.acc(grads, *x, zip(g, y, |gv, yv| gv * yv)),
            Op::Ln(x) => self.acc(grads, *x, zip(g, self.value(*x), |gv, xv| gv / xv)),
            Op::Softplus(x) => self.acc(grads, *x, zip(g, self.value(*x), |gv, xv| gv * sigmoid(xv))),
            Op::SoftmaxRows(x) => {
                let (m, n) = (y.rows(), y.cols());
                let mut gx = vec![0.0; m * n];
                for i in 0..m {
                    let (yr, gr) = (y.row_slice(i), g.row_slice(i));
                    let s = super::tensor::dot(yr, gr);
                    for j in 0..n {
                        gx[i * n + j] = yr[j] * (gr[j] - s);
                    }
                }
                self.acc(grads, *x, Tensor::matrix(m, n, gx)?);
            }
            Op::LogSoftmaxRows(x) => {
                let (m, n) = (y.rows(), y.cols());
                let mut gx = vec![0.0; m * n];
                for i in 0..m {
                    let (yr, gr) = (y.row_slice(i), g.row_slice(i));
                    let s: f64 = gr.iter().sum();
                    for j in 0..n {
                        gx[i * n + j] = gr[j] - yr[j].exp() * s;
                    }
                }
                self.acc(grads, *x, Tensor::matrix(m, n, gx)?);
            }
            Op::LayerNorm { x, inv_std } => {
                let (m, n) = (y.rows(), y.cols());
                let nf = n as f64;
                let mut gx = vec![0.0; m * n];
                for i in 0..m {
                    let (yr, gr) = (y.row_slice(i), g.row_slice(i));
                    let mg = gr.iter().sum::<f64>() / nf;
                    let mgy = super::tensor::dot(gr, yr) / nf;
                    for j in 0..n {
                        gx[i * n + j] = inv_std[i] * (gr[j] - mg - yr[j] * mgy);
                    }
                }
                self.acc(grads, *x, Tensor::matrix(m, n, gx)?);
            }
            Op::SliceCols { x, start } => {
                if self.requires_grad(*x) {
                    let (m, n) = self.dims(*x);
                    let w = g.cols();
                    let mut gx = Tensor::zeros(&[m, n]);
                    for i in 0..m {
                        gx.data_mut()[i * n + start..i * n + start + w].copy_from_slice(g.row_slice(i));
                    }
                    self.acc(grads, *x, gx);
                }
            }
            Op::ConcatCols(parts) => {
                let (m, n) = (g.rows(), g.cols());
                let mut off = 0;
                for &p in parts {
                    let w = self.dims(p).1;
                    if self.requires_grad(p) {
                        let mut data = Vec::with_capacity(m * w);
                        for i in 0..m {
                            data.extend_from_slice(&g.data()[i * n + off..i * n + off + w]);
                        }
                        self.acc(grads, p, Tensor::matrix(m, w, data)?);
                    }
                    off += w;
                }
            }
            Op::SliceRows { x, start } => {
                if self.requires_grad(*x) {
                    let (m, n) = self.dims(*x);
                    let mut gx = Tensor::zeros(&[m, n]);
                    gx.data_mut()[start * n..start * n + g.len()].copy_from_slice(g.data());
                    self.acc(grads, *x, gx);
                }
            }
            Op::ConcatRows(parts) => {
                let n = g.cols();
                let mut off = 0;
                for &p in parts {
                    let pm = self.dims(p).0;
                    if self.requires_grad(p) {
                        let data = g.data()[off * n..(off + pm) * n].to_vec();
                        self.acc(grads, p, Tensor::matrix(pm, n, data)?);
                    }
                    off += pm;
                }
            }
            Op::GatherRows { table, ids } => {
                let (m, n) = self.dims(*table);
                let mut gt = Tensor::zeros(&[m, n]);
                for (r, &id) in ids.iter().enumerate() {
                    gt.data_mut()[id * n..(id + 1) * n]
                        .iter_mut()
                        .zip(g.row_slice(r))
                        .for_each(|(a, v)| *a += v);
                }
                self.acc(grads, *table, gt);
            }
            Op::Cumsum { x, exclusive } => {
                let (m, n) = (g.rows(), g.cols());
                let mut gx = vec![0.0; m * n];
                let mut acc = vec![0.0; n];
                for i in (0..m).rev() {
                    let gr = g.row_slice(i);
                    if *exclusive {
                        gx[i * n..(i + 1) * n].copy_from_slice(&acc);
                        acc.iter_mut().zip(gr).for_each(|(a, v)| *a += v);
                    } else {
                        acc.iter_mut().zip(gr).for_each(|(a, v)| *a += v);
                        gx[i * n..(i + 1) * n].copy_from_slice(&acc);
                    }
                }
                self.acc(grads, *x, Tensor::matrix(m, n, gx)?);
            }
            Op::Sum(x) => {
                let gv = g.data()[0];
                self.acc(grads, *x, Tensor::full(self.shape(*x), gv));
            }
            Op::Mean(x) => {
                let n = self.value(*x).len() as f64;
                let gv = g.data()[0] / n;
                self.acc(grads, *x, Tensor::full(self.shape(*x), gv));
            }
            Op::PickCols { x, idx } => {
                let (m, n) = self.dims(*x);
                let mut gx = Tensor::zeros(&[m, n]);
                for (r, &c) in idx.iter().enumerate() {
                    gx.data_mut()[r * n + c] += g.data()[r];
                }
                self.acc(grads, *x, gx);
            }
        }
        Ok(())
    }

    fn acc(&self, grads: &mut [Option<Tensor>], target: Var, g: Tensor) {
        if !self.requires_grad(target) {
            return;
        }
        match &mut grads[target.0] {
            Some(existing) => existing
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(g),
        }
    }
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("zip of equal shapes")
}

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}
