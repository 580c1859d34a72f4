//! Parameter update rules.

use serde::{Deserialize, Serialize};

use super::tensor::ParameterStore;
use crate::error::{Error, Result};

fn check_shapes(params: &ParameterStore, grads: &ParameterStore, op: &str) -> Result<()> {
    for (name, p) in params.iter() {
        match grads.get(name) {
            Some(g) if g.shape() == p.shape() => {}
            Some(g) => {
                return Err(Error::shape(op, format!("{name}: param {:?} vs grad {:?}", p.shape(), g.shape())))
            }
            None => return Err(Error::shape(op, format!("missing gradient for {name}"))),
        }
    }
    Ok(())
}

/// Plain gradient descent: `p ← p − lr·g`.
pub fn sgd_step(params: &mut ParameterStore, grads: &ParameterStore, lr: f64) -> Result<()> {
    check_shapes(params, grads, "sgd_step")?;
    params.axpy(-lr, grads)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First/second moment estimates and the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub m: ParameterStore,
    pub v: ParameterStore,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &ParameterStore, config: AdamConfig) -> Self {
        AdamState { config, m: params.zeros_like(), v: params.zeros_like(), step: 0 }
    }
}

pub fn adam_step(params: &mut ParameterStore, grads: &ParameterStore, lr: f64, state: &mut AdamState) -> Result<()> {
    check_shapes(params, grads, "adam_step")?;
    check_shapes(params, &state.m, "adam_step")?;
    state.step += 1;
    let AdamConfig { beta1, beta2, eps } = state.config;
    let bc1 = 1.0 - beta1.powi(state.step as i32);
    let bc2 = 1.0 - beta2.powi(state.step as i32);
    for (name, p) in params.iter_mut() {
        let g = grads.get(name).expect("checked");
        let m = state.m.get_mut(name).expect("checked");
        for (mi, gi) in m.data_mut().iter_mut().zip(g.data()) {
            *mi = beta1 * *mi + (1.0 - beta1) * gi;
        }
        let v = state.v.get_mut(name).expect("checked");
        for (vi, gi) in v.data_mut().iter_mut().zip(g.data()) {
            *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
        }
        let m = state.m.get(name).expect("checked");
        let v = state.v.get(name).expect("checked");
        for ((pi, mi), vi) in p.data_mut().iter_mut().zip(m.data()).zip(v.data()) {
            let mhat = mi / bc1;
            let vhat = vi / bc2;
            *pi -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}
