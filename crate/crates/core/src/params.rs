//! Named parameter buffers and the small layers built on them.

use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{bail, Result};
use crate::numcore::{Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Ordered collection of named trainable tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Arc<Tensor>>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.names.contains(&name),
            "duplicate parameter name {name}"
        );
        self.names.push(name);
        self.values.push(Arc::new(value));
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        Arc::make_mut(&mut self.values[id.0])
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    /// Number of scalar parameters across all buffers.
    pub fn numel(&self) -> usize {
        self.values.iter().map(|t| t.len()).sum()
    }

    /// Number of scalars in buffers whose name starts with `prefix`.
    pub fn numel_with_prefix(&self, prefix: &str) -> usize {
        self.names
            .iter()
            .zip(&self.values)
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, t)| t.len())
            .sum()
    }

    /// Replaces a buffer, keeping its shape.
    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        if value.shape() != self.values[id.0].shape() {
            bail!(
                Dimension,
                "parameter {} has shape {:?}, got {:?}",
                self.names[id.0],
                self.values[id.0].shape(),
                value.shape()
            );
        }
        self.values[id.0] = Arc::new(value);
        Ok(())
    }

    /// Places every parameter on `g` as a leaf sharing this store's storage.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Result<Bound> {
        let vars = self
            .values
            .iter()
            .map(|v| g.shared_leaf(Arc::clone(v), trainable))
            .collect::<Result<Vec<_>>>()?;
        Ok(Bound { vars })
    }

    /// Snapshot of every buffer, in store order.
    pub fn tensors(&self) -> Vec<Tensor> {
        self.values.iter().map(|v| (**v).clone()).collect()
    }

    pub fn bitwise_eq(&self, other: &ParamStore) -> bool {
        self.names == other.names
            && self
                .values
                .iter()
                .zip(&other.values)
                .all(|(a, b)| a.bitwise_eq(b))
    }
}

/// Graph handles of a [`ParamStore`] bound to one graph.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    /// Wraps handles that stand in for a store's parameters, in store order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Bound { vars }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Gradient for every parameter, in store order; zeros where none flowed.
    pub fn grads(&self, g: &Graph) -> Vec<Vec<f64>> {
        self.vars
            .iter()
            .map(|&v| {
                g.grad(v)
                    .map(<[f64]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; g.value(v).len()])
            })
            .collect()
    }
}

/// Deterministic initialiser.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(rng: ChaCha8Rng) -> Self {
        Init { rng }
    }

    /// Uniform in `±sqrt(6 / (fan_in + fan_out))`.
    pub fn xavier(&mut self, fan_in: usize, fan_out: usize, shape: &[usize]) -> Tensor {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.rng.random_range(-a..a)).collect();
        Tensor::new(shape.to_vec(), data).expect("positive shape")
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, d_in: usize, d_out: usize) -> Self {
        let w = store.add(format!("{name}.w"), init.xavier(d_in, d_out, &[d_in, d_out]));
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[d_out]));
        Linear { w, b, d_in, d_out }
    }

    pub fn numel(d_in: usize, d_out: usize) -> usize {
        d_in * d_out + d_out
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let h = g.matmul(x, p.var(self.w))?;
        g.add_row(h, p.var(self.b))
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

pub const LN_EPS: f64 = 1e-6;

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Tensor::filled(&[d], 1.0));
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(&[d]));
        LayerNorm { gamma, beta }
    }

    pub fn numel(d: usize) -> usize {
        2 * d
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        g.layer_norm(x, p.var(self.gamma), p.var(self.beta), LN_EPS)
    }
}

/// Single-layer LSTM with gate order input, forget, cell, output.
#[derive(Clone, Debug)]
pub struct Lstm {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub b: ParamId,
    pub d_in: usize,
    pub hidden: usize,
}

impl Lstm {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, d_in: usize, hidden: usize) -> Self {
        let w_ih = store.add(
            format!("{name}.w_ih"),
            init.xavier(d_in, 4 * hidden, &[d_in, 4 * hidden]),
        );
        let w_hh = store.add(
            format!("{name}.w_hh"),
            init.xavier(hidden, 4 * hidden, &[hidden, 4 * hidden]),
        );
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[4 * hidden]));
        Lstm { w_ih, w_hh, b, d_in, hidden }
    }

    pub fn numel(d_in: usize, hidden: usize) -> usize {
        4 * hidden * (d_in + hidden) + 4 * hidden
    }

    /// Runs over the rows of `x` (first to last, or last to first when
    /// `reverse`) and returns the hidden state at each row, in row order.
    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var, reverse: bool) -> Result<Var> {
        let steps = g.value(x).rows();
        let h4 = 4 * self.hidden;
        let hd = self.hidden;
        let xw = g.matmul(x, p.var(self.w_ih))?;
        let xw = g.add_row(xw, p.var(self.b))?;
        let mut h = g.constant(Tensor::zeros(&[1, hd]))?;
        let mut c = g.constant(Tensor::zeros(&[1, hd]))?;
        let mut outs = vec![h; steps];
        let order: Vec<usize> = if reverse {
            (0..steps).rev().collect()
        } else {
            (0..steps).collect()
        };
        for t in order {
            let xt = g.slice_rows(xw, t, 1)?;
            let hh = g.matmul(h, p.var(self.w_hh))?;
            let gates = g.add(xt, hh)?;
            debug_assert_eq!(g.value(gates).cols(), h4);
            let i = g.slice_cols(gates, 0, hd)?;
            let i = g.sigmoid(i)?;
            let f = g.slice_cols(gates, hd, hd)?;
            let f = g.sigmoid(f)?;
            let cand = g.slice_cols(gates, 2 * hd, hd)?;
            let cand = g.tanh(cand)?;
            let o = g.slice_cols(gates, 3 * hd, hd)?;
            let o = g.sigmoid(o)?;
            let fc = g.mul(f, c)?;
            let ic = g.mul(i, cand)?;
            c = g.add(fc, ic)?;
            let tc = g.tanh(c)?;
            h = g.mul(o, tc)?;
            outs[t] = h;
        }
        g.concat_rows(&outs)
    }
}
