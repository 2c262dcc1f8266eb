//! AdamW with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelParams;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("AdamW betas must lie in [0, 1)".into()));
        }
        if !(self.eps > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("AdamW eps must be > 0 and weight_decay >= 0".into()));
        }
        Ok(())
    }
}

/// First and second moment estimates plus the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamWState {
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl AdamWState {
    pub fn new(num_params: usize) -> Self {
        Self {
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
            step: 0,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }
}

/// One update over flat slices:
///
/// ```text
/// m ← β₁m + (1−β₁)g,  v ← β₂v + (1−β₂)g²
/// θ ← θ − lr·(m̂/(√v̂ + eps) + wd·θ)
/// ```
pub fn adamw_step(theta: &mut [f64], grads: &[f64], state: &mut AdamWState, lr: f64, hyper: &AdamWConfig) -> Result<()> {
    if theta.len() != grads.len() || theta.len() != state.m.len() {
        return Err(Error::Dimension(format!(
            "AdamW sizes differ: params {}, grads {}, state {}",
            theta.len(),
            grads.len(),
            state.m.len()
        )));
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::Divergence {
            epoch: 0,
            batch: 0,
            message: format!("non-finite gradient at parameter {i}"),
        });
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - hyper.beta1.powi(t);
    let bc2 = 1.0 - hyper.beta2.powi(t);
    for (((p, &g), m), v) in theta.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        *m = hyper.beta1 * *m + (1.0 - hyper.beta1) * g;
        *v = hyper.beta2 * *v + (1.0 - hyper.beta2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p -= lr * (m_hat / (v_hat.sqrt() + hyper.eps) + hyper.weight_decay * *p);
    }
    Ok(())
}

/// [`adamw_step`] over every field of the model.
pub fn adamw_step_params(
    params: &mut ModelParams,
    grads: &ModelParams,
    state: &mut AdamWState,
    lr: f64,
    hyper: &AdamWConfig,
) -> Result<()> {
    let mut theta = params.to_flat();
    adamw_step(&mut theta, &grads.to_flat(), state, lr, hyper)?;
    params.set_flat(&theta)
}
