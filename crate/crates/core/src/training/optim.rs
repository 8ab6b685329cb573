use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{Layout, ModelParams};
use crate::real::Real;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.95, eps: 1e-8, weight_decay: 0.01 }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |x: f64| (0.0..1.0).contains(&x);
        if !unit(self.beta1) || !unit(self.beta2) {
            return Err(Error::Config(format!("AdamW betas must lie in [0, 1), got ({}, {})", self.beta1, self.beta2)));
        }
        if !(self.eps > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("AdamW eps must be > 0 and weight_decay >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<F> {
    pub m: Vec<F>,
    pub v: Vec<F>,
    pub step: u64,
}

impl<F: Real> OptimizerState<F> {
    pub fn new(n: usize) -> Self {
        Self { m: vec![F::zero(); n], v: vec![F::zero(); n], step: 0 }
    }

    pub fn for_params(params: &ModelParams<F>) -> Self {
        Self::new(params.len())
    }
}

/// Per-parameter weight-decay flags in flat order.
pub fn decay_mask(layout: &Layout) -> Vec<bool> {
    let mut mask = vec![false; layout.total];
    for t in &layout.tensors {
        mask[t.slot.range()].fill(t.decay);
    }
    mask
}

/// One decoupled-weight-decay Adam update over a flat parameter vector.
pub fn adamw_update<F: Real>(
    params: &mut [F],
    grads: &[F],
    decay: &[bool],
    state: &mut OptimizerState<F>,
    lr: f64,
    hyper: &AdamWConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() || params.len() != decay.len() {
        return Err(Error::arg("optimizer shapes disagree"));
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::Training { step: state.step, reason: format!("non-finite gradient at index {i}") });
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 / (1.0 - hyper.beta1.powi(t));
    let c2 = 1.0 / (1.0 - hyper.beta2.powi(t));
    let (b1, b2) = (F::lit(hyper.beta1), F::lit(hyper.beta2));
    let (one_b1, one_b2) = (F::lit(1.0 - hyper.beta1), F::lit(1.0 - hyper.beta2));
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = b1 * state.m[i] + one_b1 * g;
        state.v[i] = b2 * state.v[i] + one_b2 * g * g;
        let mhat = state.m[i].as_f64() * c1;
        let vhat = state.v[i].as_f64() * c2;
        let mut p = params[i].as_f64();
        if decay[i] {
            p -= lr * hyper.weight_decay * p;
        }
        p -= lr * mhat / (vhat.sqrt() + hyper.eps);
        params[i] = F::lit(p);
    }
    Ok(())
}

pub fn adamw_step<F: Real>(
    params: &mut ModelParams<F>,
    grads: &ModelParams<F>,
    state: &mut OptimizerState<F>,
    lr: f64,
    hyper: &AdamWConfig,
) -> Result<()> {
    let decay = decay_mask(params.layout());
    adamw_update(params.flat_mut(), grads.flat(), &decay, state, lr, hyper)
}
