use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};

/// How prior weights are scaled before they multiply attention scores.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormMode {
    /// Unmasked weights form a distribution.
    #[default]
    SumToOne,
    /// Unmasked weights average to one, so a uniform prior is all ones.
    MeanOne,
}

/// Which score index the prior weight is tied to.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ApplyMode {
    /// Score `s_ij` is multiplied by `alpha_j` (weight of the attended key).
    #[default]
    PerKey,
    /// Row `i` of the scores is multiplied by `alpha_i` (weight of the query).
    PerQuery,
}

/// Nonnegative weight per sequence position.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionPrior {
    weights: Vec<f64>,
    norm: NormMode,
    apply: ApplyMode,
}

const NORM_TOL: f64 = 1e-6;

impl AttentionPrior {
    /// Normalises raw nonnegative weights over the unmasked positions.
    ///
    /// Masked positions come out as exact zeros. If every unmasked raw weight
    /// is equal the result is exactly uniform (`1/n` or `1.0`). An all-zero
    /// input also yields the uniform prior.
    pub fn from_raw(raw: &[f64], mask: Option<&[bool]>, norm: NormMode, apply: ApplyMode) -> Result<Self> {
        if let Some(m) = mask {
            if m.len() != raw.len() {
                bail!(Dimension, "prior of length {} with mask of length {}", raw.len(), m.len());
            }
        }
        if let Some(bad) = raw.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
            bail!(Validation, "prior weight {} is negative or not finite", bad);
        }
        let valid = |i: usize| mask.is_none_or(|m| m[i]);
        let n_valid = (0..raw.len()).filter(|&i| valid(i)).count();
        if n_valid == 0 {
            bail!(Validation, "prior over an empty sequence");
        }
        let unmasked = || (0..raw.len()).filter(|&i| valid(i)).map(|i| raw[i]);
        let first = unmasked().next().expect("n_valid > 0");
        let total: f64 = unmasked().sum();
        let uniform = total == 0.0 || unmasked().all(|v| v == first);
        let target = match norm {
            NormMode::SumToOne => 1.0,
            NormMode::MeanOne => n_valid as f64,
        };
        let weights = (0..raw.len())
            .map(|i| {
                if !valid(i) {
                    0.0
                } else if uniform {
                    target / n_valid as f64
                } else {
                    raw[i] * target / total
                }
            })
            .collect();
        Ok(AttentionPrior { weights, norm, apply })
    }

    /// All-ones prior of the given length (`MeanOne`), the multiplicative identity.
    pub fn unit(len: usize, apply: ApplyMode) -> Self {
        AttentionPrior {
            weights: vec![1.0; len],
            norm: NormMode::MeanOne,
            apply,
        }
    }

    /// Wraps already-normalised weights after checking every invariant.
    pub fn new(weights: Vec<f64>, mask: Option<&[bool]>, norm: NormMode, apply: ApplyMode) -> Result<Self> {
        let p = AttentionPrior { weights, norm, apply };
        p.validate(mask)?;
        Ok(p)
    }

    pub fn validate(&self, mask: Option<&[bool]>) -> Result<()> {
        if let Some(bad) = self.weights.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
            bail!(Validation, "prior weight {} is negative or not finite", bad);
        }
        let mut sum = 0.0;
        let mut n = 0usize;
        for (i, &w) in self.weights.iter().enumerate() {
            let valid = mask.is_none_or(|m| m[i]);
            if valid {
                sum += w;
                n += 1;
            } else if w != 0.0 {
                bail!(Validation, "masked position {} has prior weight {}", i, w);
            }
        }
        if n == 0 {
            bail!(Validation, "prior over an empty sequence");
        }
        let target = match self.norm {
            NormMode::SumToOne => sum,
            NormMode::MeanOne => sum / n as f64,
        };
        if (target - 1.0).abs() > NORM_TOL {
            bail!(
                Validation,
                "prior is not normalised for {:?}: got {}",
                self.norm,
                target
            );
        }
        Ok(())
    }

    /// Same weights tied to a different score index.
    pub fn with_apply(mut self, apply: ApplyMode) -> Self {
        self.apply = apply;
        self
    }

    pub fn into_weights(self) -> Vec<f64> {
        self.weights
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn norm(&self) -> NormMode {
        self.norm
    }

    pub fn apply(&self) -> ApplyMode {
        self.apply
    }
}
