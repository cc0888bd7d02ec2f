use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::tensor::{GradMap, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig { lr, ..Self::default() }
    }
}

/// First and second moment estimates plus the shared step counter.
#[derive(Clone, Debug, Default)]
pub struct AdamState {
    pub step: u64,
    moments: HashMap<String, (Vec<f64>, Vec<f64>)>,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }
}

/// One bias-corrected Adam update of every trainable parameter that has a gradient.
///
/// Frozen parameters are never written, even if `grads` carries an entry for them.
pub fn adam_step(store: &mut ParamStore, grads: &GradMap, state: &mut AdamState, cfg: &AdamConfig) -> Result<()> {
    for (id, g) in grads {
        let p = store
            .get(id)
            .ok_or_else(|| Error::contract(format!("gradient for unknown parameter {id:?}")))?;
        if p.tensor.shape() != g.shape() {
            return Err(Error::contract(format!(
                "gradient shape {:?} does not match parameter {id} {:?}",
                g.shape(),
                p.tensor.shape()
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (id, g) in grads {
        let p = store.get_mut(id).expect("checked above");
        if !p.trainable {
            continue;
        }
        let n = g.numel();
        let (m, v) = state.moments.entry(id.clone()).or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
        for (((w, gi), mi), vi) in p.tensor.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
            *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
            let mhat = *mi / bc1;
            let vhat = *vi / bc2;
            *w -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}
