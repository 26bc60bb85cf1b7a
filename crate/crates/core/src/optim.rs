//! AdamW with decoupled weight decay over any [`Params`] container.

use serde::{Deserialize, Serialize};

use crate::nn::Params;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment estimates, flattened in parameter visiting order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamWState {
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamWState {
    pub fn new(n_params: usize) -> Self {
        Self {
            step: 0,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
        }
    }
}

pub(crate) fn flatten(p: &dyn Params) -> Vec<f64> {
    let mut out = Vec::with_capacity(p.param_count());
    p.visit("", &mut |_, a| out.extend(a.iter().copied()));
    out
}

/// One AdamW update of `params` given `grads` of the same layout.
pub fn adamw_step(
    params: &mut dyn Params,
    grads: &dyn Params,
    state: &mut AdamWState,
    cfg: &AdamWConfig,
) {
    let g = flatten(grads);
    assert_eq!(g.len(), state.m.len(), "optimizer state does not match parameters");
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    let mut i = 0;
    params.visit_mut("", &mut |_, mut a| {
        for p in a.iter_mut() {
            let gi = g[i];
            let m = &mut state.m[i];
            let v = &mut state.v[i];
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * gi;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * gi * gi;
            let update = (*m / c1) / ((*v / c2).sqrt() + cfg.eps);
            *p -= cfg.learning_rate * (update + cfg.weight_decay * *p);
            i += 1;
        }
    });
}
