//! Define-by-run reverse-mode autodiff.
//!
//! A [`Graph`] is an append-only tape. Every primitive pushes one node holding
//! its output value and enough of its inputs to run the adjoint later;
//! [`Graph::backward`] walks the tape in exact reverse order. Graphs are built
//! fresh for every forward pass and dropped afterwards.

use std::sync::Arc;

use super::Tensor;
use crate::error::{bail, Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    DivScalar(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Bce {
        logits: Var,
        targets: Vec<f64>,
    },
    Sum(Var),
    Mean(Var),
    SliceCols {
        a: Var,
        start: usize,
    },
    SliceRows {
        a: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows {
        a: Var,
        idx: Vec<usize>,
    },
    ScatterRows {
        a: Var,
        idx: Vec<usize>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::MatMulT(..) => "matmul_t",
            Op::Transpose(_) => "transpose",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::MulRow(..) => "mul_row",
            Op::MulCol(..) => "mul_col",
            Op::Scale(..) => "scale",
            Op::DivScalar(..) => "div_scalar",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Tanh(_) => "tanh",
            Op::Softmax(_) => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Bce { .. } => "bce_with_logits",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::SliceCols { .. } => "slice_cols",
            Op::SliceRows { .. } => "slice_rows",
            Op::ConcatCols(_) => "concat_cols",
            Op::ConcatRows(_) => "concat_rows",
            Op::GatherRows { .. } => "gather_rows",
            Op::ScatterRows { .. } => "scatter_rows",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b)
            | Op::MatMulT(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddRow(a, b)
            | Op::MulRow(a, b)
            | Op::MulCol(a, b) => vec![*a, *b],
            Op::Transpose(a)
            | Op::Scale(a, _)
            | Op::DivScalar(a, _)
            | Op::Relu(a)
            | Op::Sigmoid(a)
            | Op::Tanh(a)
            | Op::Softmax(a)
            | Op::Sum(a)
            | Op::Mean(a) => vec![*a],
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Bce { logits, .. } => vec![*logits],
            Op::SliceCols { a, .. }
            | Op::SliceRows { a, .. }
            | Op::GatherRows { a, .. }
            | Op::ScatterRows { a, .. } => vec![*a],
            Op::ConcatCols(v) | Op::ConcatRows(v) => v.clone(),
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Arc<Tensor>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

/// Tape of executed primitives.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    backward_done: bool,
}

fn matmul_kernel(a: &[f64], b: &[f64], r: usize, k: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        let out_row = &mut out[i * c..(i + 1) * c];
        for (p, &aip) in a[i * k..(i + 1) * k].iter().enumerate() {
            let b_row = &b[p * c..(p + 1) * c];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aip * bv;
            }
        }
    }
    out
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv += alpha * xv;
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
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

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<Var> {
        if !value.is_finite() {
            bail!(Numerical, "non-finite output produced by {}", op.name());
        }
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value: Arc::new(value),
            grad: None,
            requires_grad,
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn push_leaf(&mut self, value: Arc<Tensor>, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            bail!(Numerical, "non-finite leaf value");
        }
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op: Op::Leaf,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Trainable input; receives a gradient on backward.
    pub fn leaf(&mut self, t: Tensor) -> Result<Var> {
        self.push_leaf(Arc::new(t), true)
    }

    pub fn constant(&mut self, t: Tensor) -> Result<Var> {
        self.push_leaf(Arc::new(t), false)
    }

    /// Leaf sharing storage with a parameter store.
    pub fn shared_leaf(&mut self, t: Arc<Tensor>, requires_grad: bool) -> Result<Var> {
        self.push_leaf(t, requires_grad)
    }

    fn dims2(&self, v: Var) -> (usize, usize) {
        let t = self.value(v);
        (t.rows(), t.cols())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            bail!(Dimension, "matmul of {:?} by {:?}", sa, sb);
        }
        let (r, k, c) = (sa[0], sa[1], sb[1]);
        let data = matmul_kernel(self.value(a).data(), self.value(b).data(), r, k, c);
        self.push(Tensor::matrix(r, c, data)?, Op::MatMul(a, b))
    }

    /// `a · bᵀ` without materialising the transpose.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            bail!(Dimension, "matmul_t of {:?} by transpose of {:?}", sa, sb);
        }
        let (r, k, c) = (sa[0], sa[1], sb[0]);
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut data = Vec::with_capacity(r * c);
        for i in 0..r {
            let ar = &ad[i * k..(i + 1) * k];
            for j in 0..c {
                data.push(dot(ar, &bd[j * k..(j + 1) * k]));
            }
        }
        self.push(Tensor::matrix(r, c, data)?, Op::MatMulT(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims2(a);
        if self.shape(a).len() != 2 {
            bail!(Dimension, "transpose needs a matrix, got {:?}", self.shape(a));
        }
        let src = self.value(a).data();
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = src[i * c + j];
            }
        }
        self.push(Tensor::matrix(c, r, data)?, Op::Transpose(a))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            bail!(
                Dimension,
                "{} of {:?} and {:?}",
                what,
                self.shape(a),
                self.shape(b)
            );
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data).expect("same shape")
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let ta = self.value(a);
        Tensor::new(ta.shape().to_vec(), ta.data().iter().map(|&x| f(x)).collect())
            .expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let t = self.zip_with(a, b, |x, y| x + y);
        self.push(t, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let t = self.zip_with(a, b, |x, y| x - y);
        self.push(t, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let t = self.zip_with(a, b, |x, y| x * y);
        self.push(t, Op::Mul(a, b))
    }

    /// Adds a length-`c` vector to every row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let c = self.value(x).cols();
        if self.value(bias).len() != c {
            bail!(Dimension, "add_row of {:?} and {:?}", self.shape(x), self.shape(bias));
        }
        let b = self.value(bias).data();
        let tx = self.value(x);
        let data = tx
            .data()
            .chunks(c)
            .flat_map(|row| row.iter().zip(b).map(|(v, bv)| v + bv))
            .collect();
        let t = Tensor::new(tx.shape().to_vec(), data)?;
        self.push(t, Op::AddRow(x, bias))
    }

    /// Scales column `j` of every row by `v[j]`.
    pub fn mul_row(&mut self, x: Var, v: Var) -> Result<Var> {
        let c = self.value(x).cols();
        if self.value(v).len() != c {
            bail!(Dimension, "mul_row of {:?} by {:?}", self.shape(x), self.shape(v));
        }
        let w = self.value(v).data();
        let tx = self.value(x);
        let data = tx
            .data()
            .chunks(c)
            .flat_map(|row| row.iter().zip(w).map(|(a, b)| a * b))
            .collect();
        let t = Tensor::new(tx.shape().to_vec(), data)?;
        self.push(t, Op::MulRow(x, v))
    }

    /// Scales row `i` of `x` by `v[i]`.
    pub fn mul_col(&mut self, x: Var, v: Var) -> Result<Var> {
        let (r, c) = self.dims2(x);
        if self.value(v).len() != r {
            bail!(Dimension, "mul_col of {:?} by {:?}", self.shape(x), self.shape(v));
        }
        let w = self.value(v).data();
        let tx = self.value(x);
        let data = tx
            .data()
            .chunks(c)
            .zip(w)
            .flat_map(|(row, &s)| row.iter().map(move |a| a * s))
            .collect();
        let t = Tensor::new(tx.shape().to_vec(), data)?;
        self.push(t, Op::MulCol(x, v))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let t = self.map(a, |x| x * c);
        self.push(t, Op::Scale(a, c))
    }

    pub fn div_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        if c == 0.0 {
            bail!(Numerical, "division by zero");
        }
        let t = self.map(a, |x| x / c);
        self.push(t, Op::DivScalar(a, c))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let t = self.map(a, |x| if x > 0.0 { x } else { 0.0 });
        self.push(t, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let t = self.map(a, sigmoid);
        self.push(t, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let t = self.map(a, f64::tanh);
        self.push(t, Op::Tanh(a))
    }

    /// Softmax over the last axis.
    ///
    /// `mask` is either one flag per column (shared by all rows) or one flag
    /// per element; `false` entries are excluded from the max and the sum and
    /// come out as exact zeros. A row with no unmasked entry is an error.
    pub fn softmax(&mut self, a: Var, mask: Option<&[bool]>) -> Result<Var> {
        let t = self.value(a);
        let c = t.cols();
        if let Some(m) = mask {
            if m.len() != c && m.len() != t.len() {
                bail!(Dimension, "softmax mask of length {} for {:?}", m.len(), t.shape());
            }
        }
        let valid = |i: usize, j: usize| match mask {
            None => true,
            Some(m) if m.len() == c => m[j],
            Some(m) => m[i * c + j],
        };
        let mut out = vec![0.0; t.len()];
        for (i, row) in t.data().chunks(c).enumerate() {
            let mut max = f64::NEG_INFINITY;
            for (j, &v) in row.iter().enumerate() {
                if valid(i, j) && v > max {
                    max = v;
                }
            }
            if max == f64::NEG_INFINITY {
                bail!(Validation, "softmax row {} has no unmasked entry", i);
            }
            let o = &mut out[i * c..(i + 1) * c];
            let mut sum = 0.0;
            for (j, &v) in row.iter().enumerate() {
                if valid(i, j) {
                    let e = (v - max).exp();
                    o[j] = e;
                    sum += e;
                }
            }
            for v in o.iter_mut() {
                *v /= sum;
            }
        }
        let t = Tensor::new(t.shape().to_vec(), out)?;
        self.push(t, Op::Softmax(a))
    }

    /// Normalises each row over the last axis, then applies `gamma`/`beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let t = self.value(x);
        let d = t.cols();
        if self.value(gamma).len() != d || self.value(beta).len() != d {
            bail!(
                Dimension,
                "layer_norm over width {} with gamma {:?} and beta {:?}",
                d,
                self.shape(gamma),
                self.shape(beta)
            );
        }
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = Vec::with_capacity(t.len());
        let mut inv_std = Vec::with_capacity(t.rows());
        let mut out = Vec::with_capacity(t.len());
        for row in t.data().chunks(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * is;
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        let t = Tensor::new(t.shape().to_vec(), out)?;
        self.push(
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        )
    }

    /// Mean binary cross-entropy of `sigmoid(logits)` against soft targets.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &Tensor) -> Result<Var> {
        let z = self.value(logits);
        if z.shape() != targets.shape() {
            bail!(
                Dimension,
                "bce logits {:?} vs targets {:?}",
                z.shape(),
                targets.shape()
            );
        }
        if let Some(bad) = targets.data().iter().find(|t| !(0.0..=1.0).contains(*t)) {
            bail!(Validation, "target {} outside [0, 1]", bad);
        }
        let n = z.len() as f64;
        let total: f64 = z
            .data()
            .iter()
            .zip(targets.data())
            .map(|(&z, &t)| z.max(0.0) - z * t + (-z.abs()).exp().ln_1p())
            .sum();
        self.push(
            Tensor::scalar(total / n),
            Op::Bce {
                logits,
                targets: targets.data().to_vec(),
            },
        )
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean(a))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims2(a);
        if len == 0 || start + len > c {
            bail!(Dimension, "columns {}..{} of width {}", start, start + len, c);
        }
        let data = self
            .value(a)
            .data()
            .chunks(c)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        self.push(Tensor::matrix(r, len, data)?, Op::SliceCols { a, start })
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims2(a);
        if len == 0 || start + len > r {
            bail!(Dimension, "rows {}..{} of {}", start, start + len, r);
        }
        let data = self.value(a).data()[start * c..(start + len) * c].to_vec();
        self.push(Tensor::matrix(len, c, data)?, Op::SliceRows { a, start })
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            bail!(Dimension, "concat of nothing");
        };
        let r = self.value(first).rows();
        if parts.iter().any(|&p| self.value(p).rows() != r) {
            bail!(Dimension, "concat_cols with differing row counts");
        }
        let c: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(r * c);
        for i in 0..r {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        self.push(Tensor::matrix(r, c, data)?, Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            bail!(Dimension, "concat of nothing");
        };
        let c = self.value(first).cols();
        if parts.iter().any(|&p| self.value(p).cols() != c) {
            bail!(Dimension, "concat_rows with differing widths");
        }
        let mut data = Vec::new();
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let r = data.len() / c;
        self.push(Tensor::matrix(r, c, data)?, Op::ConcatRows(parts.to_vec()))
    }

    /// Picks rows `idx` of `a` in the given order.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let (r, c) = self.dims2(a);
        if idx.is_empty() || idx.iter().any(|&i| i >= r) {
            bail!(Dimension, "gather of rows {:?} from {} rows", idx, r);
        }
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(self.value(a).row(i));
        }
        self.push(
            Tensor::matrix(idx.len(), c, data)?,
            Op::GatherRows {
                a,
                idx: idx.to_vec(),
            },
        )
    }

    /// Inverse of [`gather_rows`](Self::gather_rows): row `k` of `a` lands at
    /// row `idx[k]` of a `total`-row zero matrix.
    pub fn scatter_rows(&mut self, a: Var, idx: &[usize], total: usize) -> Result<Var> {
        let (r, c) = self.dims2(a);
        if idx.len() != r || idx.iter().any(|&i| i >= total) {
            bail!(Dimension, "scatter of {} rows to {:?} within {}", r, idx, total);
        }
        let mut data = vec![0.0; total * c];
        for (k, &i) in idx.iter().enumerate() {
            data[i * c..(i + 1) * c].copy_from_slice(self.value(a).row(k));
        }
        self.push(
            Tensor::matrix(total, c, data)?,
            Op::ScatterRows {
                a,
                idx: idx.to_vec(),
            },
        )
    }

    /// Sign pattern of every ReLU input on the tape, used to detect finite
    /// difference stencils that straddle a kink.
    pub fn relu_pattern(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for n in &self.nodes {
            if let Op::Relu(a) = n.op {
                out.extend(self.value(a).data().iter().map(|&v| v > 0.0));
            }
        }
        out
    }

    /// Clears all gradients so that `backward` may run again.
    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
        self.backward_done = false;
    }

    /// Accumulates `d loss / d node` into every node that requires a gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).is_scalar() {
            bail!(Graph, "backward needs a scalar loss, got {:?}", self.shape(loss));
        }
        if self.backward_done {
            bail!(Graph, "backward already ran; call zero_grads first");
        }
        self.backward_done = true;
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &rest[0];
            let Some(g) = node.grad.as_deref() else {
                continue;
            };
            if !node.requires_grad {
                continue;
            }
            backprop(before, node, g)?;
        }
        for n in &mut self.nodes {
            if n.requires_grad && n.grad.is_none() {
                n.grad = Some(vec![0.0; n.value.len()]);
            }
        }
        Ok(())
    }
}

fn acc<'a>(nodes: &'a mut [Node], v: Var) -> Option<&'a mut [f64]> {
    let n = &mut nodes[v.0];
    if !n.requires_grad {
        return None;
    }
    let len = n.value.len();
    Some(n.grad.get_or_insert_with(|| vec![0.0; len]).as_mut_slice())
}

fn val(nodes: &[Node], v: Var) -> Arc<Tensor> {
    Arc::clone(&nodes[v.0].value)
}

fn backprop(nodes: &mut [Node], node: &Node, g: &[f64]) -> Result<()> {
    let out = &node.value;
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (ta, tb) = (val(nodes, *a), val(nodes, *b));
            let (r, k, c) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
            if let Some(ga) = acc(nodes, *a) {
                for i in 0..r {
                    let gi = &g[i * c..(i + 1) * c];
                    for p in 0..k {
                        ga[i * k + p] += dot(gi, &tb.data()[p * c..(p + 1) * c]);
                    }
                }
            }
            if let Some(gb) = acc(nodes, *b) {
                for i in 0..r {
                    let gi = &g[i * c..(i + 1) * c];
                    for p in 0..k {
                        axpy(ta.data()[i * k + p], gi, &mut gb[p * c..(p + 1) * c]);
                    }
                }
            }
        }
        Op::MatMulT(a, b) => {
            let (ta, tb) = (val(nodes, *a), val(nodes, *b));
            let (r, k, c) = (ta.shape()[0], ta.shape()[1], tb.shape()[0]);
            if let Some(ga) = acc(nodes, *a) {
                for i in 0..r {
                    for j in 0..c {
                        axpy(g[i * c + j], &tb.data()[j * k..(j + 1) * k], &mut ga[i * k..(i + 1) * k]);
                    }
                }
            }
            if let Some(gb) = acc(nodes, *b) {
                for i in 0..r {
                    for j in 0..c {
                        axpy(g[i * c + j], &ta.data()[i * k..(i + 1) * k], &mut gb[j * k..(j + 1) * k]);
                    }
                }
            }
        }
        Op::Transpose(a) => {
            let (r, c) = (out.shape()[1], out.shape()[0]);
            if let Some(ga) = acc(nodes, *a) {
                for i in 0..r {
                    for j in 0..c {
                        ga[i * c + j] += g[j * r + i];
                    }
                }
            }
        }
        Op::Add(a, b) => {
            if let Some(ga) = acc(nodes, *a) {
                axpy(1.0, g, ga);
            }
            if let Some(gb) = acc(nodes, *b) {
                axpy(1.0, g, gb);
            }
        }
        Op::Sub(a, b) => {
            if let Some(ga) = acc(nodes, *a) {
                axpy(1.0, g, ga);
            }
            if let Some(gb) = acc(nodes, *b) {
                axpy(-1.0, g, gb);
            }
        }
        Op::Mul(a, b) => {
            let (ta, tb) = (val(nodes, *a), val(nodes, *b));
            if let Some(ga) = acc(nodes, *a) {
                for ((o, &gv), &bv) in ga.iter_mut().zip(g).zip(tb.data()) {
                    *o += gv * bv;
                }
            }
            if let Some(gb) = acc(nodes, *b) {
                for ((o, &gv), &av) in gb.iter_mut().zip(g).zip(ta.data()) {
                    *o += gv * av;
                }
            }
        }
        Op::AddRow(x, b) => {
            let c = out.cols();
            if let Some(gx) = acc(nodes, *x) {
                axpy(1.0, g, gx);
            }
            if let Some(gb) = acc(nodes, *b) {
                for row in g.chunks(c) {
                    axpy(1.0, row, gb);
                }
            }
        }
        Op::MulRow(x, v) => {
            let c = out.cols();
            let (tx, tv) = (val(nodes, *x), val(nodes, *v));
            if let Some(gx) = acc(nodes, *x) {
                for (grow, orow) in g.chunks(c).zip(gx.chunks_mut(c)) {
                    for ((o, &gv), &w) in orow.iter_mut().zip(grow).zip(tv.data()) {
                        *o += gv * w;
                    }
                }
            }
            if let Some(gv) = acc(nodes, *v) {
                for (grow, xrow) in g.chunks(c).zip(tx.data().chunks(c)) {
                    for ((o, &gg), &xv) in gv.iter_mut().zip(grow).zip(xrow) {
                        *o += gg * xv;
                    }
                }
            }
        }
        Op::MulCol(x, v) => {
            let c = out.cols();
            let (tx, tv) = (val(nodes, *x), val(nodes, *v));
            if let Some(gx) = acc(nodes, *x) {
                for ((grow, orow), &w) in g.chunks(c).zip(gx.chunks_mut(c)).zip(tv.data()) {
                    axpy(w, grow, orow);
                }
            }
            if let Some(gv) = acc(nodes, *v) {
                for ((grow, xrow), o) in g.chunks(c).zip(tx.data().chunks(c)).zip(gv.iter_mut()) {
                    *o += dot(grow, xrow);
                }
            }
        }
        Op::Scale(a, c) => {
            if let Some(ga) = acc(nodes, *a) {
                axpy(*c, g, ga);
            }
        }
        Op::DivScalar(a, c) => {
            if let Some(ga) = acc(nodes, *a) {
                for (o, &gv) in ga.iter_mut().zip(g) {
                    *o += gv / c;
                }
            }
        }
        Op::Relu(a) => {
            let ta = val(nodes, *a);
            if let Some(ga) = acc(nodes, *a) {
                for ((o, &gv), &x) in ga.iter_mut().zip(g).zip(ta.data()) {
                    if x > 0.0 {
                        *o += gv;
                    }
                }
            }
        }
        Op::Sigmoid(a) => {
            if let Some(ga) = acc(nodes, *a) {
                for ((o, &gv), &y) in ga.iter_mut().zip(g).zip(out.data()) {
                    *o += gv * y * (1.0 - y);
                }
            }
        }
        Op::Tanh(a) => {
            if let Some(ga) = acc(nodes, *a) {
                for ((o, &gv), &y) in ga.iter_mut().zip(g).zip(out.data()) {
                    *o += gv * (1.0 - y * y);
                }
            }
        }
        Op::Softmax(a) => {
            let c = out.cols();
            if let Some(ga) = acc(nodes, *a) {
                for ((grow, yrow), orow) in g.chunks(c).zip(out.data().chunks(c)).zip(ga.chunks_mut(c)) {
                    let s = dot(grow, yrow);
                    for ((o, &gv), &y) in orow.iter_mut().zip(grow).zip(yrow) {
                        if y != 0.0 {
                            *o += y * (gv - s);
                        }
                    }
                }
            }
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
        } => {
            let d = out.cols();
            let tg = val(nodes, *gamma);
            if let Some(gb) = acc(nodes, *beta) {
                for row in g.chunks(d) {
                    axpy(1.0, row, gb);
                }
            }
            if let Some(gg) = acc(nodes, *gamma) {
                for (row, hrow) in g.chunks(d).zip(xhat.chunks(d)) {
                    for ((o, &gv), &h) in gg.iter_mut().zip(row).zip(hrow) {
                        *o += gv * h;
                    }
                }
            }
            if let Some(gx) = acc(nodes, *x) {
                let mut ghat = vec![0.0; d];
                for (((row, hrow), orow), &is) in g
                    .chunks(d)
                    .zip(xhat.chunks(d))
                    .zip(gx.chunks_mut(d))
                    .zip(inv_std)
                {
                    for ((gh, &gv), &gm) in ghat.iter_mut().zip(row).zip(tg.data()) {
                        *gh = gv * gm;
                    }
                    let m1 = ghat.iter().sum::<f64>() / d as f64;
                    let m2 = dot(&ghat, hrow) / d as f64;
                    for ((o, &gh), &h) in orow.iter_mut().zip(&ghat).zip(hrow) {
                        *o += is * (gh - m1 - h * m2);
                    }
                }
            }
        }
        Op::Bce { logits, targets } => {
            let tz = val(nodes, *logits);
            let n = tz.len() as f64;
            let s = g[0] / n;
            if let Some(gz) = acc(nodes, *logits) {
                for ((o, &z), &t) in gz.iter_mut().zip(tz.data()).zip(targets) {
                    *o += s * (sigmoid(z) - t);
                }
            }
        }
        Op::Sum(a) => {
            if let Some(ga) = acc(nodes, *a) {
                for o in ga.iter_mut() {
                    *o += g[0];
                }
            }
        }
        Op::Mean(a) => {
            if let Some(ga) = acc(nodes, *a) {
                let s = g[0] / ga.len() as f64;
                for o in ga.iter_mut() {
                    *o += s;
                }
            }
        }
        Op::SliceCols { a, start } => {
            let len = out.cols();
            let c = nodes[a.0].value.cols();
            if let Some(ga) = acc(nodes, *a) {
                for (grow, orow) in g.chunks(len).zip(ga.chunks_mut(c)) {
                    axpy(1.0, grow, &mut orow[*start..start + len]);
                }
            }
        }
        Op::SliceRows { a, start } => {
            let c = out.cols();
            if let Some(ga) = acc(nodes, *a) {
                axpy(1.0, g, &mut ga[start * c..start * c + g.len()]);
            }
        }
        Op::ConcatCols(parts) => {
            let c = out.cols();
            let mut off = 0;
            for &p in parts {
                let pc = nodes[p.0].value.cols();
                if let Some(gp) = acc(nodes, p) {
                    for (grow, prow) in g.chunks(c).zip(gp.chunks_mut(pc)) {
                        axpy(1.0, &grow[off..off + pc], prow);
                    }
                }
                off += pc;
            }
        }
        Op::ConcatRows(parts) => {
            let mut off = 0;
            for &p in parts {
                let len = nodes[p.0].value.len();
                if let Some(gp) = acc(nodes, p) {
                    axpy(1.0, &g[off..off + len], gp);
                }
                off += len;
            }
        }
        Op::GatherRows { a, idx } => {
            let c = out.cols();
            if let Some(ga) = acc(nodes, *a) {
                for (k, &i) in idx.iter().enumerate() {
                    axpy(1.0, &g[k * c..(k + 1) * c], &mut ga[i * c..(i + 1) * c]);
                }
            }
        }
        Op::ScatterRows { a, idx } => {
            let c = out.cols();
            if let Some(ga) = acc(nodes, *a) {
                for (k, &i) in idx.iter().enumerate() {
                    axpy(1.0, &g[i * c..(i + 1) * c], &mut ga[k * c..(k + 1) * c]);
                }
            }
        }
    }
    Ok(())
}

/// Convenience for tests and callers that need an owned copy of a gradient.
pub fn grad_tensor(g: &Graph, v: Var) -> Result<Tensor> {
    let grad = g
        .grad(v)
        .ok_or_else(|| Error::Graph(format!("node {} has no gradient", v.0)))?;
    Tensor::new(g.shape(v).to_vec(), grad.to_vec())
}
