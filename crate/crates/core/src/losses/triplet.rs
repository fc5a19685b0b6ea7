use ndarray::Array2;

use super::{check_indices, LossError, LossResult, Triplet, TripletSpec};
use crate::encoder::DescriptorBatch;

/// Hinge value and per-descriptor gradients of one triplet.
#[derive(Debug, Clone, PartialEq)]
pub struct TripletTerm {
    pub value: f64,
    pub grad_anchor: Vec<f64>,
    pub grad_positive: Vec<f64>,
    pub grad_negative: Vec<f64>,
}

fn distance_and_direction(a: &[f64], b: &[f64]) -> (f64, Vec<f64>) {
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let d = diff.iter().map(|v| v * v).sum::<f64>().sqrt();
    if d == 0.0 {
        // Coincident points: the distance gradient is taken as zero.
        (0.0, vec![0.0; a.len()])
    } else {
        (d, diff.into_iter().map(|v| v / d).collect())
    }
}

/// `max(|a - p| - |a - n| + margin, 0)`; the subgradient at the hinge is 0.
pub fn triplet_loss(
    anchor: &[f64],
    positive: &[f64],
    negative: &[f64],
    spec: &TripletSpec,
) -> Result<TripletTerm, LossError> {
    let dim = anchor.len();
    for other in [positive.len(), negative.len()] {
        if other != dim {
            return Err(LossError::DimensionMismatch(dim, other));
        }
    }
    let (d_ap, u_ap) = distance_and_direction(anchor, positive);
    let (d_an, u_an) = distance_and_direction(anchor, negative);
    let raw = d_ap - d_an + spec.margin;
    if raw <= 0.0 {
        return Ok(TripletTerm {
            value: 0.0,
            grad_anchor: vec![0.0; dim],
            grad_positive: vec![0.0; dim],
            grad_negative: vec![0.0; dim],
        });
    }
    Ok(TripletTerm {
        value: raw,
        grad_anchor: u_ap.iter().zip(&u_an).map(|(p, n)| p - n).collect(),
        grad_positive: u_ap.iter().map(|v| -v).collect(),
        grad_negative: u_an,
    })
}

/// Mean triplet loss over the active (non-zero) triplets of a batch.
pub fn triplet_batch_loss(
    batch: &DescriptorBatch,
    triplets: &[Triplet],
    spec: &TripletSpec,
) -> Result<LossResult, LossError> {
    check_indices(
        batch.len(),
        triplets.iter().flat_map(|t| [t.anchor, t.positive, t.negative]),
    )?;
    let mut total = 0.0;
    let mut grad = Array2::<f64>::zeros((batch.len(), batch.dim()));
    let mut active = 0usize;
    for t in triplets {
        let term = triplet_loss(batch.row(t.anchor), batch.row(t.positive), batch.row(t.negative), spec)?;
        if term.value > 0.0 {
            active += 1;
            total += term.value;
            for (row, g) in [
                (t.anchor, &term.grad_anchor),
                (t.positive, &term.grad_positive),
                (t.negative, &term.grad_negative),
            ] {
                for (dst, v) in grad.row_mut(row).iter_mut().zip(g) {
                    *dst += v;
                }
            }
        }
    }
    if active == 0 {
        return Ok(LossResult::zero(batch.len(), batch.dim()));
    }
    let scale = 1.0 / active as f64;
    grad.mapv_inplace(|g| g * scale);
    Ok(LossResult {
        value: total * scale,
        grad,
        terms: active,
        skipped: 0,
    })
}
