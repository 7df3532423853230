//! Bias-corrected adaptive-moment updates.

use crate::error::{InifError, Result};
use crate::siren::{Gradients, SirenParams};

#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
    pub step_size: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(params: &SirenParams, step_size: f64) -> Self {
        let shapes: Vec<usize> = params.tensors().iter().map(|t| t.len()).collect();
        AdamState {
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
            step_size,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

pub fn adam_step(state: &mut AdamState, params: &mut SirenParams, grads: &Gradients) -> Result<()> {
    let grad_tensors = grads.tensors();
    let mut param_tensors = params.tensors_mut();
    if grad_tensors.len() != param_tensors.len()
        || grad_tensors
            .iter()
            .zip(&param_tensors)
            .any(|(g, p)| g.len() != p.len())
    {
        return Err(InifError::ShapeMismatch(
            "gradient shapes do not mirror params".into(),
        ));
    }
    if grad_tensors.iter().any(|g| g.iter().any(|v| !v.is_finite())) {
        return Err(InifError::Diverged {
            step: state.t as usize,
            what: "non-finite gradient".into(),
        });
    }
    state.t += 1;
    let bc1 = 1.0 - state.beta1.powi(state.t as i32);
    let bc2 = 1.0 - state.beta2.powi(state.t as i32);
    for (ti, g) in grad_tensors.iter().enumerate() {
        let m = &mut state.m[ti];
        let v = &mut state.v[ti];
        let p = &mut param_tensors[ti];
        for j in 0..g.len() {
            m[j] = state.beta1 * m[j] + (1.0 - state.beta1) * g[j];
            v[j] = state.beta2 * v[j] + (1.0 - state.beta2) * g[j] * g[j];
            let mhat = m[j] / bc1;
            let vhat = v[j] / bc2;
            p[j] -= state.step_size * mhat / (vhat.sqrt() + state.eps);
        }
    }
    Ok(())
}
