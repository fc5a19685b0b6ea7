//! Training objectives and their gradients with respect to descriptors.
//!
//! Every batch loss returns a [`LossResult`] whose `grad` has the shape of
//! the student descriptor matrix. Teacher descriptors are constants.

mod distill;
mod schedule;
mod triplet;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use distill::{
    angle_cosine, angle_cosine_grad, distill_loss, euclid_distill, huber, huber_grad, point_distill, sa_loss,
    triplet_pairs,
};
pub use schedule::{omega, relaxation_weight, ScheduleSpec};
pub use triplet::{triplet_batch_loss, triplet_loss, TripletTerm};

/// Smallest difference norm for which an angle is considered defined.
pub const ANGLE_EPS: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("angle undefined: a difference vector has norm below {ANGLE_EPS}")]
    DegenerateAngle,
    #[error("no tuples to distill")]
    EmptyTupleSet,
    #[error("student and teacher batches are not aligned by sample id")]
    Misaligned,
    #[error("descriptor dimensions differ ({0} vs {1})")]
    DimensionMismatch(usize, usize),
    #[error("index {index} out of range for batch of {len}")]
    IndexOutOfRange { index: usize, len: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TripletSpec {
    pub margin: f64,
}

impl Default for TripletSpec {
    fn default() -> Self {
        Self { margin: 0.2 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistillKind {
    #[default]
    Angular,
    Euclidean,
    Point,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillSpec {
    pub kind: DistillKind,
    /// Hinge margin on the Huber penalty of the angular loss.
    pub margin: f64,
    pub lambda_init: f64,
}

impl Default for DistillSpec {
    fn default() -> Self {
        Self {
            kind: DistillKind::Angular,
            margin: 0.01,
            lambda_init: 1.0,
        }
    }
}

/// Indices into a descriptor batch. For angular distillation the anchor is
/// the vertex of the angle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Triplet {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
}

impl Triplet {
    pub fn new(anchor: usize, positive: usize, negative: usize) -> Self {
        Self {
            anchor,
            positive,
            negative,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossResult {
    pub value: f64,
    pub grad: Array2<f64>,
    /// Terms averaged into `value`.
    pub terms: usize,
    /// Tuples skipped as degenerate.
    pub skipped: usize,
}

impl LossResult {
    pub fn zero(rows: usize, dim: usize) -> Self {
        Self {
            value: 0.0,
            grad: Array2::zeros((rows, dim)),
            terms: 0,
            skipped: 0,
        }
    }
}

/// `L = L_triplet + lambda * L_distill`, gradients combined the same way.
pub fn combined_loss(triplet: &LossResult, distill: &LossResult, lambda: f64) -> LossResult {
    assert_eq!(triplet.grad.dim(), distill.grad.dim(), "gradients must align");
    if lambda == 0.0 {
        return triplet.clone();
    }
    LossResult {
        value: triplet.value + lambda * distill.value,
        grad: &triplet.grad + &(lambda * &distill.grad),
        terms: triplet.terms,
        skipped: distill.skipped,
    }
}

fn check_indices(len: usize, idx: impl IntoIterator<Item = usize>) -> Result<(), LossError> {
    for index in idx {
        if index >= len {
            return Err(LossError::IndexOutOfRange { index, len });
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(value: f64) -> LossResult {
        LossResult {
            value,
            grad: Array2::from_elem((1, 2), value),
            terms: 1,
            skipped: 0,
        }
    }

    #[test]
    fn combined_is_linear() {
        let c = combined_loss(&scalar(0.7), &scalar(0.22), 0.5);
        assert!((c.value - 0.81).abs() < 1e-12);
        assert!((c.grad[[0, 0]] - 0.81).abs() < 1e-12);
    }

    #[test]
    fn zero_lambda_is_exactly_triplet() {
        let t = scalar(0.7);
        assert_eq!(combined_loss(&t, &scalar(123.0), 0.0), t);
    }

    #[test]
    fn both_zero_gives_zero() {
        let z = LossResult::zero(3, 4);
        let c = combined_loss(&z, &z, 0.3);
        assert_eq!(c.value, 0.0);
        assert!(c.grad.iter().all(|&g| g == 0.0));
    }
}
