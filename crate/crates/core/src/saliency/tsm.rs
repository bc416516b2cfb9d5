use serde::{Deserialize, Serialize};

use crate::attention::{AttentionBlock, MultiHeadConfig, NormMode};
use crate::error::{bail, Result};
use crate::numcore::{Graph, Var};
use crate::params::{Bound, Init, Linear, Lstm, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TsmConfig {
    pub hidden: usize,
    pub heads: usize,
}

impl Default for TsmConfig {
    fn default() -> Self {
        TsmConfig { hidden: 128, heads: 4 }
    }
}

impl TsmConfig {
    fn block_cfg(&self) -> MultiHeadConfig {
        MultiHeadConfig {
            d_model: 2 * self.hidden,
            heads: self.heads,
            ffn_hidden: self.hidden,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 {
            bail!(Config, "text saliency hidden size must be positive");
        }
        self.block_cfg().validate()
    }
}

/// Scores every question token: BiLSTM, one transformer layer, then a scalar
/// head whose outputs are softmaxed over the valid tokens.
#[derive(Clone, Debug)]
pub struct TextSaliencyNet {
    pub cfg: TsmConfig,
    pub d_in: usize,
    pub fwd: Lstm,
    pub bwd: Lstm,
    pub layer: AttentionBlock,
    pub head: Linear,
}

impl TextSaliencyNet {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, d_in: usize, cfg: TsmConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(TextSaliencyNet {
            cfg,
            d_in,
            fwd: Lstm::new(store, init, &format!("{name}.lstm_fwd"), d_in, cfg.hidden),
            bwd: Lstm::new(store, init, &format!("{name}.lstm_bwd"), d_in, cfg.hidden),
            layer: AttentionBlock::new(store, init, &format!("{name}.layer"), cfg.block_cfg()),
            head: Linear::new(store, init, &format!("{name}.head"), 2 * cfg.hidden, 1),
        })
    }

    pub fn numel(d_in: usize, cfg: &TsmConfig) -> usize {
        2 * Lstm::numel(d_in, cfg.hidden) + AttentionBlock::numel(&cfg.block_cfg()) + Linear::numel(2 * cfg.hidden, 1)
    }

    /// Prior over the `n` rows of `emb` as a `1×n` row: masked tokens get
    /// exactly zero, the rest sum to one (or average to one under `MeanOne`).
    pub fn forward(&self, g: &mut Graph, p: &Bound, emb: Var, mask: Option<&[bool]>, norm: NormMode) -> Result<Var> {
        let n = g.value(emb).rows();
        if g.value(emb).cols() != self.d_in {
            bail!(
                Dimension,
                "text saliency input of width {}, expected {}",
                g.value(emb).cols(),
                self.d_in
            );
        }
        if let Some(m) = mask {
            if m.len() != n {
                bail!(Dimension, "token mask of length {} for {} tokens", m.len(), n);
            }
        }
        let idx: Vec<usize> = (0..n).filter(|&i| mask.is_none_or(|m| m[i])).collect();
        if idx.is_empty() {
            bail!(Validation, "question has no valid token");
        }
        let all = idx.len() == n;
        let x = if all { emb } else { g.gather_rows(emb, &idx)? };
        let hf = self.fwd.forward(g, p, x, false)?;
        let hb = self.bwd.forward(g, p, x, true)?;
        let h = g.concat_cols(&[hf, hb])?;
        let h = self.layer.self_attend(g, p, h, None, None)?.output;
        let scores = self.head.forward(g, p, h)?;
        let row = g.transpose(scores)?;
        let mut w = g.softmax(row, None)?;
        if norm == NormMode::MeanOne {
            w = g.scale(w, idx.len() as f64)?;
        }
        if all {
            return Ok(w);
        }
        let col = g.transpose(w)?;
        let full = g.scatter_rows(col, &idx, n)?;
        g.transpose(full)
    }
}
