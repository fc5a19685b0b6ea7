use serde::{Deserialize, Serialize};

use super::DistillSpec;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSpec {
    pub total_epochs: usize,
}

/// Sigmoid relaxation `1 / (1 + exp(10 (gamma / tau - 1/2)))`.
pub fn omega(gamma: f64, tau: f64) -> f64 {
    1.0 / (1.0 + (10.0 * (gamma / tau - 0.5)).exp())
}

/// Distillation weight at epoch `gamma`: `lambda_init * omega(gamma)`.
pub fn relaxation_weight(gamma: f64, schedule: &ScheduleSpec, spec: &DistillSpec) -> f64 {
    assert!(schedule.total_epochs >= 1, "schedule needs at least one epoch");
    spec.lambda_init * omega(gamma, schedule.total_epochs as f64)
}
