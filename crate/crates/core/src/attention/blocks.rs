use super::{MultiHead, MultiHeadConfig, PriorRef};
use crate::error::{bail, Result};
use crate::numcore::{Graph, Var};
use crate::params::{Bound, Init, LayerNorm, Linear, ParamStore};

/// Position-wise `linear → ReLU → linear`.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, d: usize, hidden: usize) -> Self {
        FeedForward {
            up: Linear::new(store, init, &format!("{name}.up"), d, hidden),
            down: Linear::new(store, init, &format!("{name}.down"), hidden, d),
        }
    }

    pub fn numel(d: usize, hidden: usize) -> usize {
        Linear::numel(d, hidden) + Linear::numel(hidden, d)
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let h = self.up.forward(g, p, x)?;
        let h = g.relu(h)?;
        self.down.forward(g, p, h)
    }
}

/// Attention sub-layer and feed-forward sub-layer, each wrapped in a residual
/// connection followed by layer normalisation. Used for both self-attention
/// (queries, keys and values from one stream) and guided attention (keys and
/// values from the other stream).
#[derive(Clone, Debug)]
pub struct AttentionBlock {
    pub mha: MultiHead,
    pub norm1: LayerNorm,
    pub ffn: FeedForward,
    pub norm2: LayerNorm,
}

/// Block output and the per-head attention distributions.
#[derive(Clone, Debug)]
pub struct BlockOut {
    pub output: Var,
    pub head_weights: Vec<Var>,
}

fn require_valid(mask: Option<&[bool]>, what: &str) -> Result<()> {
    if let Some(m) = mask {
        if !m.iter().any(|&v| v) {
            bail!(Validation, "{} has no valid position", what);
        }
    }
    Ok(())
}

impl AttentionBlock {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, cfg: MultiHeadConfig) -> Self {
        AttentionBlock {
            mha: MultiHead::new(store, init, &format!("{name}.mha"), cfg),
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), cfg.d_model),
            ffn: FeedForward::new(store, init, &format!("{name}.ffn"), cfg.d_model, cfg.ffn_hidden),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), cfg.d_model),
        }
    }

    pub fn numel(cfg: &MultiHeadConfig) -> usize {
        MultiHead::numel(cfg.d_model) + FeedForward::numel(cfg.d_model, cfg.ffn_hidden) + 2 * LayerNorm::numel(cfg.d_model)
    }

    fn run(
        &self,
        g: &mut Graph,
        p: &Bound,
        x: Var,
        kv: Var,
        prior: Option<PriorRef>,
        key_mask: Option<&[bool]>,
    ) -> Result<BlockOut> {
        let att = self.mha.forward(g, p, x, kv, prior, key_mask)?;
        let r1 = g.add(x, att.output)?;
        let h1 = self.norm1.forward(g, p, r1)?;
        let f = self.ffn.forward(g, p, h1)?;
        let r2 = g.add(h1, f)?;
        let output = self.norm2.forward(g, p, r2)?;
        Ok(BlockOut {
            output,
            head_weights: att.head_weights,
        })
    }

    /// `LN(X + MHA(X, X, X)) → LN(· + FFN(·))`, with an optional prior on
    /// the attention scores.
    pub fn self_attend(
        &self,
        g: &mut Graph,
        p: &Bound,
        x: Var,
        prior: Option<PriorRef>,
        mask: Option<&[bool]>,
    ) -> Result<BlockOut> {
        require_valid(mask, "self-attention input")?;
        self.run(g, p, x, x, prior, mask)
    }

    /// Queries from `x`, keys and values from `y`. Priors never enter here.
    pub fn guided_attend(
        &self,
        g: &mut Graph,
        p: &Bound,
        x: Var,
        y: Var,
        x_mask: Option<&[bool]>,
        y_mask: Option<&[bool]>,
    ) -> Result<BlockOut> {
        require_valid(x_mask, "guided-attention query stream")?;
        require_valid(y_mask, "guided-attention key stream")?;
        self.run(g, p, x, y, None, y_mask)
    }
}
