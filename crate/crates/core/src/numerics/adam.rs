use std::collections::BTreeMap;

use super::params::ParamSet;
use super::tensor::Tensor2;
use crate::error::{ensure, Result};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// Per-parameter first and second moments.
#[derive(Clone, Debug)]
pub struct AdamState {
    step: u64,
    moments: BTreeMap<String, (Tensor2, Tensor2)>,
}

impl Default for AdamState {
    fn default() -> Self {
        Self::new()
    }
}

impl AdamState {
    pub fn new() -> Self {
        Self {
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }
}

/// One Adam update of every parameter from its populated gradient slot.
/// Gradient slots are cleared afterwards.
pub fn adam_step(params: &mut ParamSet, state: &mut AdamState, lr: f64) -> Result<()> {
    ensure!(
        params.has_grads(),
        State,
        "adam step requested before gradients were populated"
    );
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - BETA1.powi(t);
    let bc2 = 1.0 - BETA2.powi(t);
    let names: Vec<String> = params.names().map(str::to_string).collect();
    for name in names {
        let grad = params.grad(&name).expect("checked above").clone();
        let (m, v) = state.moments.entry(name.clone()).or_insert_with(|| {
            (
                Tensor2::zeros(grad.rows(), grad.cols()),
                Tensor2::zeros(grad.rows(), grad.cols()),
            )
        });
        let value = params.value_mut(&name).expect("name from params");
        for (((p, g), m), v) in value
            .data_mut()
            .iter_mut()
            .zip(grad.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *m = BETA1 * *m + (1.0 - BETA1) * g;
            *v = BETA2 * *v + (1.0 - BETA2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= lr * m_hat / (v_hat.sqrt() + EPSILON);
        }
    }
    params.clear_grads();
    Ok(())
}
