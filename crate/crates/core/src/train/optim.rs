use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::params::ParamStore;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.98;
pub const ADAM_EPS: f64 = 1e-9;

/// First and second moments for one buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        AdamState {
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }
}

/// One bias-corrected Adam update of `params` in place. `t` counts from 1.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, t: u64, lr: f64) -> Result<()> {
    if t == 0 {
        bail!(Validation, "adam step counter starts at 1");
    }
    if params.len() != grads.len() || state.m.len() != params.len() || state.v.len() != params.len() {
        bail!(
            Dimension,
            "adam buffers disagree: params {}, grads {}, moments {}/{}",
            params.len(),
            grads.len(),
            state.m.len(),
            state.v.len()
        );
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        bail!(Numerical, "gradient {} at index {} of {}", grads[i], i, grads.len());
    }
    let c1 = 1.0 - ADAM_BETA1.powi(t as i32);
    let c2 = 1.0 - ADAM_BETA2.powi(t as i32);
    for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
        *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
    }
    Ok(())
}

/// Adam over every buffer of a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Adam {
    states: Vec<AdamState>,
    t: u64,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Self {
        Adam {
            states: store.ids().map(|id| AdamState::new(store.get(id).len())).collect(),
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Applies `grads` (store order). Nothing is modified if any gradient is
    /// not finite.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Vec<f64>], lr: f64) -> Result<()> {
        if grads.len() != self.states.len() {
            bail!(Dimension, "{} gradients for {} parameters", grads.len(), self.states.len());
        }
        for (id, g) in store.ids().zip(grads) {
            if let Some(bad) = g.iter().find(|v| !v.is_finite()) {
                bail!(Numerical, "gradient {} in parameter {}", bad, store.name(id));
            }
        }
        self.t += 1;
        let ids: Vec<_> = store.ids().collect();
        for ((id, g), s) in ids.into_iter().zip(grads).zip(&mut self.states) {
            adam_step(store.get_mut(id).data_mut(), g, s, self.t, lr)?;
        }
        Ok(())
    }
}

/// Linear warmup from `base/(warmup+1)`, then step decay.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub warmup_epochs: usize,
    /// 1-based epochs from which another `decay_factor` applies.
    pub decay_epochs: Vec<usize>,
    pub decay_factor: f64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule {
            base_lr: 1e-4,
            warmup_epochs: 3,
            decay_epochs: vec![10, 12],
            decay_factor: 0.2,
        }
    }
}

impl LrSchedule {
    /// Rate for 1-based `epoch`.
    pub fn lr(&self, epoch: usize) -> f64 {
        if epoch <= self.warmup_epochs {
            return self.base_lr * epoch as f64 / (self.warmup_epochs + 1) as f64;
        }
        let k = self.decay_epochs.iter().filter(|&&d| epoch >= d).count();
        self.base_lr * self.decay_factor.powi(k as i32)
    }

    pub fn validate(&self, epochs: usize) -> Vec<String> {
        let mut bad = Vec::new();
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            bad.push(format!("base_lr must be positive, got {}", self.base_lr));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor.is_finite()) {
            bad.push(format!("decay_factor must be positive, got {}", self.decay_factor));
        }
        for &d in &self.decay_epochs {
            if d == 0 || d > epochs {
                bad.push(format!("decay epoch {d} outside 1..={epochs}"));
            }
        }
        bad
    }
}
