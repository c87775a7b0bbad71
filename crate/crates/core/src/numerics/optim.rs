//! Adam and the warmup/decay learning-rate schedule.

use super::params::{Gradients, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

pub const ADAM_BETA1: f32 = 0.9;
pub const ADAM_BETA2: f32 = 0.98;
pub const ADAM_EPS: f32 = 1e-8;

#[derive(Debug, Clone)]
pub struct AdamState {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        let zeros = || params.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        AdamState {
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            eps: ADAM_EPS,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self, idx: usize) -> &Tensor {
        &self.m[idx]
    }

    pub fn second_moment(&self, idx: usize) -> &Tensor {
        &self.v[idx]
    }
}

/// One bias-corrected Adam update of every parameter in `params`.
pub fn adam_step(params: &mut ParamStore, grads: &Gradients, state: &mut AdamState, lr: f32) -> Result<()> {
    if params.len() != state.m.len() {
        return Err(Error::shape("adam_step", &[params.len()], &[state.m.len()]));
    }
    for id in params.ids() {
        let g = grads.get(id);
        if g.shape() != params.get(id).shape() || g.shape() != state.m[id.index()].shape() {
            return Err(Error::shape("adam_step", params.get(id).shape(), g.shape()));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    let bc1 = 1.0 - b1.powi(t);
    let bc2 = 1.0 - b2.powi(t);
    for id in params.ids() {
        let i = id.index();
        let g = grads.get(id).data();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        let p = params.get_mut(id).data_mut();
        for j in 0..p.len() {
            m[j] = b1 * m[j] + (1.0 - b1) * g[j];
            v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
            let mh = m[j] / bc1;
            let vh = v[j] / bc2;
            p[j] -= lr * mh / (vh.sqrt() + eps);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecayMode {
    /// `peak * w / t`
    InverseLinear,
    /// `peak * sqrt(w / t)`
    InverseSqrt,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrSchedule {
    pub floor: f32,
    pub peak: f32,
    pub warmup_steps: u64,
    pub decay: DecayMode,
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule {
            floor: 1e-7,
            peak: 0.005,
            warmup_steps: 100,
            decay: DecayMode::InverseLinear,
        }
    }
}

impl LrSchedule {
    /// Learning rate for 1-based step `t`: linear warmup from `floor` to
    /// `peak` over `warmup_steps`, then decay.
    pub fn lr_at(&self, t: u64) -> f32 {
        let t = t.max(1);
        let w = self.warmup_steps.max(1);
        if t <= w {
            let frac = t as f64 / w as f64;
            (self.floor as f64 + frac * (self.peak as f64 - self.floor as f64)) as f32
        } else {
            let ratio = w as f64 / t as f64;
            let scale = match self.decay {
                DecayMode::InverseLinear => ratio,
                DecayMode::InverseSqrt => ratio.sqrt(),
            };
            (self.peak as f64 * scale) as f32
        }
    }
}
