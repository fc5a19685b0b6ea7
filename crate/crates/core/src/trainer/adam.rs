//! ADAM with decoupled weight decay and a two-stage learning rate.

use serde::{Deserialize, Serialize};

use super::TrainError;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// First and second moment estimates plus the update count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub first: Vec<f64>,
    pub second: Vec<f64>,
    pub timestep: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            first: vec![0.0; len],
            second: vec![0.0; len],
            timestep: 0,
        }
    }

    pub fn reset(&mut self) {
        self.first.iter_mut().for_each(|m| *m = 0.0);
        self.second.iter_mut().for_each(|v| *v = 0.0);
        self.timestep = 0;
    }

    pub fn len(&self) -> usize {
        self.first.len()
    }

    pub fn is_empty(&self) -> bool {
        self.first.is_empty()
    }
}

/// `initial` for the first half of the step's epochs, `after_half` after.
pub fn learning_rate(epoch: usize, total_epochs: usize, initial: f64, after_half: f64) -> f64 {
    if 2 * epoch < total_epochs {
        initial
    } else {
        after_half
    }
}

/// One update. Weight decay shrinks the parameters before the moment
/// update; the adaptive step uses bias-corrected moments.
pub fn adam_step(
    params: &mut [f64],
    state: &mut AdamState,
    grad: &[f64],
    lr: f64,
    weight_decay: f64,
    epoch: usize,
) -> Result<(), TrainError> {
    if grad.len() != params.len() || state.len() != params.len() {
        return Err(TrainError::GradientLength {
            expected: params.len(),
            got: grad.len(),
        });
    }
    if let Some(index) = grad.iter().position(|g| !g.is_finite()) {
        return Err(TrainError::NonFiniteGradient { epoch, index });
    }
    state.timestep += 1;
    let t = state.timestep as i32;
    let c1 = 1.0 - BETA1.powi(t);
    let c2 = 1.0 - BETA2.powi(t);
    for (((p, &g), m), v) in params
        .iter_mut()
        .zip(grad)
        .zip(state.first.iter_mut())
        .zip(state.second.iter_mut())
    {
        *p -= lr * weight_decay * *p;
        *m = BETA1 * *m + (1.0 - BETA1) * g;
        *v = BETA2 * *v + (1.0 - BETA2) * g * g;
        *p -= lr * (*m / c1) / ((*v / c2).sqrt() + EPSILON);
    }
    Ok(())
}
