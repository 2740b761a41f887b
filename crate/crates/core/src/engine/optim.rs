use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use crate::error::{Error, Result};

/// Adam with a step-decay learning-rate schedule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub learning_rate: f64,
    pub step_count: u64,
    /// Optimizer steps between decays.
    pub decay_every: u64,
    pub decay_factor: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// First and second moments keyed by parameter name.
    #[serde(skip)]
    pub moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl OptimizerState {
    pub fn new(learning_rate: f64, decay_every: u64, decay_factor: f64) -> Result<Self> {
        if !(learning_rate > 0.0) || !learning_rate.is_finite() {
            return Err(Error::InvalidArgument(format!("learning rate {learning_rate} must be > 0")));
        }
        if !(decay_factor > 0.0 && decay_factor < 1.0) {
            return Err(Error::InvalidArgument(format!("decay factor {decay_factor} must lie in (0, 1)")));
        }
        if decay_every == 0 {
            return Err(Error::InvalidArgument("decay_every must be >= 1".into()));
        }
        Ok(OptimizerState {
            learning_rate,
            step_count: 0,
            decay_every,
            decay_factor,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            moments: BTreeMap::new(),
        })
    }
}

/// One Adam update over every unfrozen parameter, then the step-decay check.
pub fn adam_step(store: &mut ParamStore, state: &mut OptimizerState) -> Result<()> {
    let names: Vec<String> = store.trainable_names().map(str::to_string).collect();
    for name in &names {
        if store.grad(name).is_none() {
            return Err(Error::MissingGrad(name.clone()));
        }
    }
    let t = (state.step_count + 1) as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    let (b1, b2, eps, lr) = (state.beta1, state.beta2, state.eps, state.learning_rate);
    for name in &names {
        let grad = store.grad(name).expect("checked above").data().to_vec();
        let (m, v) = state
            .moments
            .entry(name.clone())
            .or_insert_with(|| (vec![0.0; grad.len()], vec![0.0; grad.len()]));
        let param = store.get_mut(name)?.data_mut();
        for i in 0..param.len() {
            m[i] = b1 * m[i] + (1.0 - b1) * grad[i];
            v[i] = b2 * v[i] + (1.0 - b2) * grad[i] * grad[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            param[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    state.step_count += 1;
    if state.step_count % state.decay_every == 0 {
        state.learning_rate *= state.decay_factor;
    }
    Ok(())
}
