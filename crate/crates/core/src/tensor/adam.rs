//! Adam optimizer with bias correction.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::params::ParamStore;

use super::Scalar;

/// Per-parameter first/second moment accumulators plus the shared step
/// counter and constants. The beta/epsilon defaults are the usual
/// (0.9, 0.999, 1e-8).
#[derive(Debug, Clone)]
pub struct OptimizerState<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    moments: HashMap<String, (Vec<T>, Vec<T>)>,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(lr: f64) -> Self {
        OptimizerState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments: HashMap::new(),
        }
    }
}

/// One Adam update over every trainable parameter that has a gradient in
/// `grads`. Parameters and moments are swept in store order, so the update is
/// deterministic.
pub fn adam_step<T: Scalar>(
    params: &mut ParamStore<T>,
    grads: &HashMap<String, Vec<T>>,
    state: &mut OptimizerState<T>,
) -> Result<()> {
    state.step += 1;
    let t = state.step;
    let bc1 = T::from_f64(1.0 - state.beta1.powi(t as i32));
    let bc2 = T::from_f64(1.0 - state.beta2.powi(t as i32));
    let b1 = T::from_f64(state.beta1);
    let b2 = T::from_f64(state.beta2);
    let one_m_b1 = T::one() - b1;
    let one_m_b2 = T::one() - b2;
    let lr = T::from_f64(state.lr);
    let eps = T::from_f64(state.eps);

    // Collect names first so the moments map can be borrowed mutably inside.
    let moments = &mut state.moments;
    let mut result = Ok(());
    params.apply_grads(grads, |name, data, grad| {
        if result.is_err() {
            return;
        }
        let (m, v) = moments
            .entry(name.to_string())
            .or_insert_with(|| (vec![T::zero(); data.len()], vec![T::zero(); data.len()]));
        if m.len() != data.len() {
            result = Err(Error::invalid(
                "adam_step",
                format!("moment shape for {} does not match parameter", name),
            ));
            return;
        }
        for i in 0..data.len() {
            let g = grad[i];
            m[i] = b1 * m[i] + one_m_b1 * g;
            v[i] = b2 * v[i] + one_m_b2 * g * g;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            data[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    })?;
    result
}
