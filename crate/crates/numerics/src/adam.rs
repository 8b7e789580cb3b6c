use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{NumericsError, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// First/second moment estimates for every parameter, plus the step count.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    first: BTreeMap<String, Tensor>,
    second: BTreeMap<String, Tensor>,
    step: u64,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self, name: &str) -> Option<&Tensor> {
        self.first.get(name)
    }

    pub fn second_moment(&self, name: &str) -> Option<&Tensor> {
        self.second.get(name)
    }
}

/// One bias-corrected Adam update of every parameter in `params`.
pub fn adam_step(params: &mut ParamStore, state: &mut AdamState, lr: f64) -> Result<()> {
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(NumericsError::InvalidArgument(format!(
            "learning rate {lr}"
        )));
    }
    // Validate before mutating anything.
    for name in params.names() {
        params.grad(name)?;
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - BETA1.powi(t);
    let bc2 = 1.0 - BETA2.powi(t);

    for (name, value, grad) in params.iter_mut() {
        let grad = grad.ok_or_else(|| NumericsError::MissingGradient(name.clone()))?;
        let m = state
            .first
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(value.shape()));
        let v = state
            .second
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(value.shape()));
        if m.shape() != value.shape() || v.shape() != value.shape() {
            return Err(NumericsError::ShapeMismatch {
                op: "adam",
                lhs: value.shape().to_vec(),
                rhs: m.shape().to_vec(),
            });
        }
        let (p, g) = (value.data_mut(), grad.data());
        let (m, v) = (m.data_mut(), v.data_mut());
        for i in 0..p.len() {
            m[i] = BETA1 * m[i] + (1.0 - BETA1) * g[i];
            v[i] = BETA2 * v[i] + (1.0 - BETA2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            p[i] -= lr * m_hat / (v_hat.sqrt() + EPSILON);
        }
    }
    Ok(())
}
