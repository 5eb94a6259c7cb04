//! Adam with decoupled weight decay.

use crate::error::{Error, Result};
use crate::net::NetworkParams;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub learning_rate: f32,
    pub weight_decay: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { learning_rate: 5e-5, weight_decay: 1e-2, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First/second moment buffers plus the shared step counter.
#[derive(Clone, Debug, Default)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

impl AdamState {
    pub fn for_sizes(sizes: &[usize]) -> Self {
        AdamState {
            step: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }
}

/// One AdamW update on a flat buffer. Decay is decoupled: w *= 1 - lr * wd
/// before the (bias-corrected) Adam step.
pub fn adamw_update(
    w: &mut [f32],
    g: &[f32],
    m: &mut [f32],
    v: &mut [f32],
    step: u64,
    cfg: &AdamConfig,
) {
    let b1c = 1.0 - cfg.beta1.powi(step as i32);
    let b2c = 1.0 - cfg.beta2.powi(step as i32);
    let decay = 1.0 - cfg.learning_rate * cfg.weight_decay;
    for i in 0..w.len() {
        w[i] *= decay;
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
        let mh = m[i] / b1c;
        let vh = v[i] / b2c;
        w[i] -= cfg.learning_rate * mh / (vh.sqrt() + cfg.eps);
    }
}

/// Apply one AdamW step over all trainable tensors of the network. Gradients
/// arrive in `for_each_trainable` order. A non-finite gradient rejects the
/// whole step.
pub fn adamw_step(
    params: &mut NetworkParams<f32>,
    grads: &[Vec<f32>],
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<()> {
    for (i, g) in grads.iter().enumerate() {
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric("adamw_step", format!("non-finite gradient in tensor {}", i)));
        }
    }
    let mut count = 0;
    params.for_each_trainable(&mut |_| count += 1);
    if grads.len() != count {
        return Err(Error::Data(format!("adamw_step: {} gradients for {} tensors", grads.len(), count)));
    }
    if state.m.is_empty() {
        *state = AdamState::for_sizes(&grads.iter().map(|g| g.len()).collect::<Vec<_>>());
    }
    state.step += 1;
    let step = state.step;
    let mut idx = 0;
    let mut bad: Option<String> = None;
    params.for_each_trainable_mut(&mut |t| {
        if bad.is_some() {
            return;
        }
        if grads[idx].len() != t.len() {
            bad = Some(format!("gradient {} has length {}, tensor has {}", idx, grads[idx].len(), t.len()));
            return;
        }
        adamw_update(t.data_mut(), &grads[idx], &mut state.m[idx], &mut state.v[idx], step, cfg);
        idx += 1;
    });
    match bad {
        Some(detail) => Err(Error::shape("adamw_step", detail)),
        None => Ok(()),
    }
}
