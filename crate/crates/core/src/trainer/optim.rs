use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::tensor::{Tensor, TensorError};

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPSILON: f64 = 1e-8;

/// First and second moment estimates, one pair per parameter tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub t: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(params: &[Tensor]) -> Self {
        let zeros = || {
            params
                .iter()
                .map(|p| Tensor::zeros(p.shape().to_vec()))
                .collect()
        };
        Self {
            t: 0,
            m: zeros(),
            v: zeros(),
        }
    }
}

/// Euclidean norm of all gradient entries together.
pub fn global_norm(grads: &[Tensor]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.data())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
}

/// Clips `grads` to global norm `clip`, then applies one Adam update.
/// Returns the norm before clipping.
pub fn optimizer_step(
    params: &mut [Tensor],
    grads: &[Tensor],
    state: &mut AdamState,
    learning_rate: f64,
    clip: f64,
) -> Result<f64> {
    debug_assert_eq!(params.len(), grads.len());
    let norm = global_norm(grads);
    if !norm.is_finite() {
        return Err(TensorError::Numeric { op: "optimizer" }.into());
    }
    let factor = if norm > clip { clip / norm } else { 1.0 };
    state.t += 1;
    let t = state.t as i32;
    let bias1 = 1.0 - BETA1.powi(t);
    let bias2 = 1.0 - BETA2.powi(t);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (((p, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
            let g = g * factor;
            *m = BETA1 * *m + (1.0 - BETA1) * g;
            *v = BETA2 * *v + (1.0 - BETA2) * g * g;
            *p -= learning_rate * (*m / bias1) / ((*v / bias2).sqrt() + EPSILON);
        }
    }
    Ok(norm)
}
