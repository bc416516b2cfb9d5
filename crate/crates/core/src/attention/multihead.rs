use serde::{Deserialize, Serialize};

use super::ApplyMode;
use crate::error::{bail, Result};
use crate::numcore::{Graph, Var};
use crate::params::{Bound, Init, Linear, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MultiHeadConfig {
    pub d_model: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
}

impl MultiHeadConfig {
    pub fn new(d_model: usize, heads: usize, ffn_hidden: usize) -> Result<Self> {
        let cfg = MultiHeadConfig {
            d_model,
            heads,
            ffn_hidden,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.heads == 0 || self.ffn_hidden == 0 {
            bail!(Config, "attention dimensions must be positive: {:?}", self);
        }
        if self.d_model % self.heads != 0 {
            bail!(
                Config,
                "d_model {} is not divisible by {} heads",
                self.d_model,
                self.heads
            );
        }
        Ok(())
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.heads
    }
}

/// A prior placed on the graph, ready to modulate scores.
#[derive(Clone, Copy, Debug)]
pub struct PriorRef {
    pub alpha: Var,
    pub apply: ApplyMode,
}

/// Attended values and the attention distribution that produced them.
#[derive(Clone, Copy, Debug)]
pub struct Attended {
    pub output: Var,
    pub weights: Var,
}

fn check_mask(mask: Option<&[bool]>, n_k: usize) -> Result<()> {
    if let Some(m) = mask {
        if m.len() != n_k {
            bail!(Dimension, "key mask of length {} for {} keys", m.len(), n_k);
        }
        if !m.iter().any(|&v| v) {
            bail!(Validation, "every key is masked");
        }
    }
    Ok(())
}

fn attend(
    g: &mut Graph,
    q: Var,
    k: Var,
    v: Var,
    prior: Option<PriorRef>,
    key_mask: Option<&[bool]>,
) -> Result<Attended> {
    let (n_q, d) = (g.value(q).rows(), g.value(q).cols());
    let n_k = g.value(k).rows();
    if g.value(k).cols() != d || g.value(v).rows() != n_k {
        bail!(
            Dimension,
            "attention with Q {:?}, K {:?}, V {:?}",
            g.shape(q),
            g.shape(k),
            g.shape(v)
        );
    }
    check_mask(key_mask, n_k)?;
    let mut scores = g.matmul_t(q, k)?;
    if let Some(p) = prior {
        let alpha = g.value(p.alpha);
        if let Some(bad) = alpha.data().iter().find(|a| **a < 0.0) {
            bail!(Validation, "negative prior weight {}", bad);
        }
        let expect = match p.apply {
            ApplyMode::PerKey => n_k,
            ApplyMode::PerQuery => n_q,
        };
        if alpha.len() != expect {
            bail!(
                Dimension,
                "{:?} prior of length {} where {} positions are scored",
                p.apply,
                alpha.len(),
                expect
            );
        }
        scores = match p.apply {
            ApplyMode::PerKey => g.mul_row(scores, p.alpha)?,
            ApplyMode::PerQuery => g.mul_col(scores, p.alpha)?,
        };
    }
    let scaled = g.div_scalar(scores, (d as f64).sqrt())?;
    let weights = g.softmax(scaled, key_mask)?;
    let output = g.matmul(weights, v)?;
    Ok(Attended { output, weights })
}

/// `softmax(Q Kᵀ / √d) V` over the unmasked keys.
pub fn scaled_dot_attention(g: &mut Graph, q: Var, k: Var, v: Var, key_mask: Option<&[bool]>) -> Result<Attended> {
    attend(g, q, k, v, None, key_mask)
}

/// Like [`scaled_dot_attention`] but each raw score is multiplied by the
/// prior weight (of its key or of its query, per the prior's mode) before the
/// `√d` division.
pub fn prior_modulated_attention(
    g: &mut Graph,
    q: Var,
    k: Var,
    v: Var,
    prior: PriorRef,
    key_mask: Option<&[bool]>,
) -> Result<Attended> {
    attend(g, q, k, v, Some(prior), key_mask)
}

#[derive(Clone, Debug)]
pub struct MultiHead {
    pub cfg: MultiHeadConfig,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
}

/// Output of a multi-head call plus each head's attention distribution.
#[derive(Clone, Debug)]
pub struct MultiHeadOut {
    pub output: Var,
    pub head_weights: Vec<Var>,
}

impl MultiHead {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, cfg: MultiHeadConfig) -> Self {
        let d = cfg.d_model;
        MultiHead {
            cfg,
            q: Linear::new(store, init, &format!("{name}.q"), d, d),
            k: Linear::new(store, init, &format!("{name}.k"), d, d),
            v: Linear::new(store, init, &format!("{name}.v"), d, d),
            out: Linear::new(store, init, &format!("{name}.out"), d, d),
        }
    }

    pub fn numel(d_model: usize) -> usize {
        4 * Linear::numel(d_model, d_model)
    }

    /// Projects, attends per head (the same prior is shared by every head),
    /// concatenates and projects back.
    pub fn forward(
        &self,
        g: &mut Graph,
        p: &Bound,
        q_in: Var,
        kv_in: Var,
        prior: Option<PriorRef>,
        key_mask: Option<&[bool]>,
    ) -> Result<MultiHeadOut> {
        let q = self.q.forward(g, p, q_in)?;
        let k = self.k.forward(g, p, kv_in)?;
        let v = self.v.forward(g, p, kv_in)?;
        let dh = self.cfg.d_head();
        let mut heads = Vec::with_capacity(self.cfg.heads);
        let mut head_weights = Vec::with_capacity(self.cfg.heads);
        for h in 0..self.cfg.heads {
            let qh = g.slice_cols(q, h * dh, dh)?;
            let kh = g.slice_cols(k, h * dh, dh)?;
            let vh = g.slice_cols(v, h * dh, dh)?;
            let a = attend(g, qh, kh, vh, prior, key_mask)?;
            heads.push(a.output);
            head_weights.push(a.weights);
        }
        let cat = if heads.len() == 1 {
            heads[0]
        } else {
            g.concat_cols(&heads)?
        };
        let output = self.out.forward(g, p, cat)?;
        Ok(MultiHeadOut { output, head_weights })
    }
}
