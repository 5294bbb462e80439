//! Dense row-major `f64` tensors and a tape for reverse-mode differentiation.
//!
//! Every operation is a method on [`Tape`] that records its inputs and a
//! backward rule. Tensors are treated as a stack of rows: the last extent is
//! the row width, everything before it is flattened into the row count. This
//! is all the model needs (queries are `1×D`, keys/values are `L×D`).
//!
//! The tape is rebuilt for every forward pass. Leaves can borrow parameter
//! tensors so that binding a large parameter set costs nothing.

use crate::error::{Error, Result};
use rand::Rng;
use rand_distr::{Distribution, Normal};

pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const L2_NORM_EPS: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(Error::Contract(format!(
                "tensor extents must be positive, got {shape:?}"
            )));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::dim("tensor", &shape, &[data.len()]));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    /// A `1×n` row.
    pub fn row(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![1, data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Samples entries from `N(0, std²)`.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, std).expect("std must be finite and non-negative");
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..n).map(|_| normal.sample(rng)).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Width of the last dimension.
    pub fn cols(&self) -> usize {
        *self.shape.last().expect("shape is non-empty")
    }

    /// Number of last-dimension slices.
    pub fn rows(&self) -> usize {
        self.data.len() / self.cols()
    }

    pub fn row_slice(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn is_matrix(&self) -> bool {
        self.shape.len() == 2
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Value<'a> {
    Owned(Tensor),
    Borrowed(&'a Tensor),
}

impl Value<'_> {
    fn get(&self) -> &Tensor {
        match self {
            Value::Owned(t) => t,
            Value::Borrowed(t) => t,
        }
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Scale(Var, f64),
    MulConst(Var, Vec<f64>),
    Relu(Var),
    Sigmoid(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        normed: Vec<f64>,
        inv_std: Vec<f64>,
    },
    L2Normalize {
        x: Var,
        norms: Vec<f64>,
        eps: f64,
    },
    ConcatCols(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    StackRows(Vec<Var>),
    Sum(Var),
    FocalLoss {
        probs: Var,
        targets: Vec<f64>,
        alpha: f64,
        gamma: f64,
    },
}

struct Node<'a> {
    value: Value<'a>,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation. Node order is creation order, which is a valid
/// topological order because every op only refers to existing nodes.
#[derive(Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.nodes[v.0].value.get()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Leaf that receives gradients.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Borrowed leaf that receives gradients.
    pub fn param(&mut self, value: &'a Tensor) -> Var {
        self.nodes.push(Node {
            value: Value::Borrowed(value),
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant_ref(&mut self, value: &'a Tensor) -> Var {
        self.nodes.push(Node {
            value: Value::Borrowed(value),
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if !ta.is_matrix() || !tb.is_matrix() || ta.shape[1] != tb.shape[0] {
            return Err(Error::dim("matmul", ta.shape(), tb.shape()));
        }
        let (m, p, n) = (ta.shape[0], ta.shape[1], tb.shape[1]);
        let out = matmul_raw(&ta.data, &tb.data, m, p, n);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(
            Tensor {
                shape: vec![m, n],
                data: out,
            },
            Op::MatMul(a, b),
            rg,
        ))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if !t.is_matrix() {
            return Err(Error::dim("transpose", t.shape(), &[]));
        }
        let (r, c) = (t.shape[0], t.shape[1]);
        let out = transpose_raw(&t.data, r, c);
        let rg = self.any_grad(&[x]);
        Ok(self.push(
            Tensor {
                shape: vec![c, r],
                data: out,
            },
            Op::Transpose(x),
            rg,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape != tb.shape {
            return Err(Error::dim("add", ta.shape(), tb.shape()));
        }
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| x + y).collect();
        let shape = ta.shape.clone();
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor { shape, data }, Op::Add(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let t = self.value(x);
        let data = t.data.iter().map(|v| v * factor).collect();
        let shape = t.shape.clone();
        let rg = self.any_grad(&[x]);
        self.push(Tensor { shape, data }, Op::Scale(x, factor), rg)
    }

    /// Elementwise product with a constant of the same length.
    pub fn mul_const(&mut self, x: Var, factors: Vec<f64>) -> Result<Var> {
        let t = self.value(x);
        if factors.len() != t.len() {
            return Err(Error::dim("mul_const", t.shape(), &[factors.len()]));
        }
        let data = t.data.iter().zip(&factors).map(|(v, f)| v * f).collect();
        let shape = t.shape.clone();
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor { shape, data }, Op::MulConst(x, factors), rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let data = t.data.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        let shape = t.shape.clone();
        let rg = self.any_grad(&[x]);
        self.push(Tensor { shape, data }, Op::Relu(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let data = t.data.iter().map(|&v| sigmoid(v)).collect();
        let shape = t.shape.clone();
        let rg = self.any_grad(&[x]);
        self.push(Tensor { shape, data }, Op::Sigmoid(x), rg)
    }

    /// Softmax over each last-dimension slice, max-subtracted.
    pub fn softmax(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let c = t.cols();
        let mut data = t.data.clone();
        for row in data.chunks_mut(c) {
            softmax_in_place(row);
        }
        let shape = t.shape.clone();
        let rg = self.any_grad(&[x]);
        self.push(Tensor { shape, data }, Op::Softmax(x), rg)
    }

    /// Layer normalization over the last dimension followed by an affine
    /// transform. `gain` and `bias` must each hold one value per column.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gain), self.value(bias));
        let c = tx.cols();
        if tg.len() != c || tb.len() != c {
            return Err(Error::dim("layer_norm", tx.shape(), tg.shape()));
        }
        let mut normed = vec![0.0; tx.len()];
        let mut inv_std = Vec::with_capacity(tx.rows());
        let mut out = vec![0.0; tx.len()];
        for (r, row) in tx.data.chunks(c).enumerate() {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std.push(inv);
            for j in 0..c {
                let xh = (row[j] - mean) * inv;
                normed[r * c + j] = xh;
                out[r * c + j] = tg.data[j] * xh + tb.data[j];
            }
        }
        let shape = tx.shape.clone();
        let rg = self.any_grad(&[x, gain, bias]);
        Ok(self.push(
            Tensor { shape, data: out },
            Op::LayerNorm {
                x,
                gain,
                bias,
                normed,
                inv_std,
            },
            rg,
        ))
    }

    /// Divides each last-dimension slice by `max(‖slice‖₂, eps)`.
    pub fn l2_normalize(&mut self, x: Var, eps: f64) -> Var {
        let t = self.value(x);
        let c = t.cols();
        let mut data = t.data.clone();
        let mut norms = Vec::with_capacity(t.rows());
        for row in data.chunks_mut(c) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            norms.push(n);
            let d = n.max(eps);
            row.iter_mut().for_each(|v| *v /= d);
        }
        let shape = t.shape.clone();
        let rg = self.any_grad(&[x]);
        self.push(Tensor { shape, data }, Op::L2Normalize { x, norms, eps }, rg)
    }

    /// Concatenates along the last dimension. All parts must have the same
    /// number of rows and the same leading shape.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let lead = self.value(*first).shape[..self.value(*first).shape.len() - 1].to_vec();
        let rows = self.value(*first).rows();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let t = self.value(p);
            if t.shape[..t.shape.len() - 1] != lead[..] {
                return Err(Error::dim("concat", self.value(*first).shape(), t.shape()));
            }
            widths.push(t.cols());
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row_slice(r));
            }
        }
        let mut shape = lead;
        shape.push(total);
        let rg = self.any_grad(parts);
        Ok(self.push(Tensor { shape, data }, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Columns `start..start+len` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        if !t.is_matrix() || len == 0 || start + len > t.cols() {
            return Err(Error::dim("slice_cols", t.shape(), &[start, len]));
        }
        let rows = t.rows();
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&t.row_slice(r)[start..start + len]);
        }
        let rg = self.any_grad(&[x]);
        Ok(self.push(
            Tensor {
                shape: vec![rows, len],
                data,
            },
            Op::SliceCols { x, start },
            rg,
        ))
    }

    /// Stacks matrices with equal column counts on top of each other.
    pub fn stack_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("stack of zero tensors".into()))?;
        let c = self.value(*first).cols();
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if !t.is_matrix() || t.cols() != c {
                return Err(Error::dim("stack_rows", self.value(*first).shape(), t.shape()));
            }
            data.extend_from_slice(&t.data);
        }
        let rows = data.len() / c;
        let rg = self.any_grad(parts);
        Ok(self.push(
            Tensor {
                shape: vec![rows, c],
                data,
            },
            Op::StackRows(parts.to_vec()),
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data.iter().sum();
        let rg = self.any_grad(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// Summed binary focal loss of a probability row against multi-hot targets.
    pub fn focal_loss(&mut self, probs: Var, targets: &[f64], alpha: f64, gamma: f64) -> Result<Var> {
        let t = self.value(probs);
        if t.len() != targets.len() {
            return Err(Error::Contract(format!(
                "focal loss: {} probabilities vs {} targets",
                t.len(),
                targets.len()
            )));
        }
        let loss = crate::train::focal_terms(&t.data, targets, alpha, gamma)
            .map(|(l, _)| l)
            .sum();
        let rg = self.any_grad(&[probs]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::FocalLoss {
                probs,
                targets: targets.to_vec(),
                alpha,
                gamma,
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar `loss`. Only nodes that require grad get
    /// an entry in the result.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.backprop_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        for (i, n) in self.nodes.iter().enumerate() {
            if !n.requires_grad {
                grads[i] = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, node: &Node<'_>, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = node.value.get();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, p, n) = (ta.shape[0], ta.shape[1], tb.shape[1]);
                if self.requires_grad(*a) {
                    let bt = transpose_raw(&tb.data, p, n);
                    let da = matmul_raw(g, &bt, m, n, p);
                    self.accumulate(grads, *a, &da);
                }
                if self.requires_grad(*b) {
                    let at = transpose_raw(&ta.data, m, p);
                    let db = matmul_raw(&at, g, p, m, n);
                    self.accumulate(grads, *b, &db);
                }
            }
            Op::Transpose(x) => {
                let (r, c) = (out.shape[0], out.shape[1]);
                let dx = transpose_raw(g, r, c);
                self.accumulate(grads, *x, &dx);
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g);
                self.accumulate(grads, *b, g);
            }
            Op::Scale(x, f) => {
                let dx: Vec<f64> = g.iter().map(|v| v * f).collect();
                self.accumulate(grads, *x, &dx);
            }
            Op::MulConst(x, f) => {
                let dx: Vec<f64> = g.iter().zip(f).map(|(v, f)| v * f).collect();
                self.accumulate(grads, *x, &dx);
            }
            Op::Relu(x) => {
                let xv = &self.value(*x).data;
                let dx: Vec<f64> = g
                    .iter()
                    .zip(xv)
                    .map(|(gv, &v)| if v > 0.0 { *gv } else { 0.0 })
                    .collect();
                self.accumulate(grads, *x, &dx);
            }
            Op::Sigmoid(x) => {
                let dx: Vec<f64> = g
                    .iter()
                    .zip(&out.data)
                    .map(|(gv, s)| gv * s * (1.0 - s))
                    .collect();
                self.accumulate(grads, *x, &dx);
            }
            Op::Softmax(x) => {
                let c = out.cols();
                let mut dx = vec![0.0; g.len()];
                for ((dxr, gr), yr) in dx.chunks_mut(c).zip(g.chunks(c)).zip(out.data.chunks(c)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        dxr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.accumulate(grads, *x, &dx);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                normed,
                inv_std,
            } => {
                let c = out.cols();
                let gv = &self.value(*gain).data;
                let mut dgain = vec![0.0; c];
                let mut dbias = vec![0.0; c];
                let mut dx = vec![0.0; g.len()];
                for (r, gr) in g.chunks(c).enumerate() {
                    let xh = &normed[r * c..(r + 1) * c];
                    let mut sum_d = 0.0;
                    let mut sum_dx = 0.0;
                    for j in 0..c {
                        dgain[j] += gr[j] * xh[j];
                        dbias[j] += gr[j];
                        let d = gr[j] * gv[j];
                        sum_d += d;
                        sum_dx += d * xh[j];
                    }
                    let inv = inv_std[r];
                    let n = c as f64;
                    for j in 0..c {
                        let d = gr[j] * gv[j];
                        dx[r * c + j] = inv / n * (n * d - sum_d - xh[j] * sum_dx);
                    }
                }
                self.accumulate(grads, *x, &dx);
                self.accumulate(grads, *gain, &dgain);
                self.accumulate(grads, *bias, &dbias);
            }
            Op::L2Normalize { x, norms, eps } => {
                let c = out.cols();
                let mut dx = vec![0.0; g.len()];
                for (r, (gr, yr)) in g.chunks(c).zip(out.data.chunks(c)).enumerate() {
                    let n = norms[r];
                    if n >= *eps {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            dx[r * c + j] = (gr[j] - yr[j] * dot) / n;
                        }
                    } else {
                        for j in 0..c {
                            dx[r * c + j] = gr[j] / eps;
                        }
                    }
                }
                self.accumulate(grads, *x, &dx);
            }
            Op::ConcatCols(parts) => {
                let total = out.cols();
                let rows = out.rows();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if self.requires_grad(p) {
                        let mut dp = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            dp.extend_from_slice(&g[r * total + offset..r * total + offset + w]);
                        }
                        self.accumulate(grads, p, &dp);
                    }
                    offset += w;
                }
            }
            Op::SliceCols { x, start } => {
                let tx = self.value(*x);
                let (rows, c, len) = (tx.rows(), tx.cols(), out.cols());
                let mut dx = vec![0.0; tx.len()];
                for r in 0..rows {
                    dx[r * c + start..r * c + start + len].copy_from_slice(&g[r * len..(r + 1) * len]);
                }
                self.accumulate(grads, *x, &dx);
            }
            Op::StackRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    self.accumulate(grads, p, &g[offset..offset + n]);
                    offset += n;
                }
            }
            Op::Sum(x) => {
                let dx = vec![g[0]; self.value(*x).len()];
                self.accumulate(grads, *x, &dx);
            }
            Op::FocalLoss {
                probs,
                targets,
                alpha,
                gamma,
            } => {
                let p = &self.value(*probs).data;
                let dx: Vec<f64> = crate::train::focal_terms(p, targets, *alpha, *gamma)
                    .map(|(_, d)| d * g[0])
                    .collect();
                self.accumulate(grads, *probs, &dx);
            }
        }
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, delta: &[f64]) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.iter_mut().zip(delta).for_each(|(a, d)| *a += d),
            slot @ None => *slot = Some(delta.to_vec()),
        }
    }
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, p: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for k in 0..p {
            let aik = a[i * p + k];
            if aik == 0.0 {
                continue;
            }
            let brow = &b[k * n..(k + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += aik * bv;
            }
        }
    }
    out
}

fn transpose_raw(a: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a[i * c + j];
        }
    }
    out
}

/// Logistic function evaluated without overflow for large `|x|`.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    row.iter_mut().for_each(|v| *v /= sum);
}
