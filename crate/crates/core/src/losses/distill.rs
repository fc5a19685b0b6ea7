//! Teacher-to-student distillation losses: the angular structure loss and
//! the position and pairwise-distance baselines it is compared against.

use ndarray::Array2;

use super::{check_indices, DistillKind, DistillSpec, LossError, LossResult, Triplet, ANGLE_EPS};
use crate::encoder::DescriptorBatch;

/// Huber kernel with unit threshold.
pub fn huber(x: f64) -> f64 {
    if x.abs() <= 1.0 {
        0.5 * x * x
    } else {
        x.abs() - 0.5
    }
}

pub fn huber_grad(x: f64) -> f64 {
    if x.abs() <= 1.0 {
        x
    } else {
        x.signum()
    }
}

fn unit_diff(a: &[f64], b: &[f64]) -> Result<(Vec<f64>, f64), LossError> {
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let norm = diff.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm < ANGLE_EPS {
        return Err(LossError::DegenerateAngle);
    }
    Ok((diff.into_iter().map(|v| v / norm).collect(), norm))
}

/// Cosine of the angle at vertex `vj` spanned by `vi` and `vk`.
pub fn angle_cosine(vi: &[f64], vj: &[f64], vk: &[f64]) -> Result<f64, LossError> {
    let (u, _) = unit_diff(vi, vj)?;
    let (w, _) = unit_diff(vk, vj)?;
    Ok(u.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>().clamp(-1.0, 1.0))
}

/// The cosine together with its gradients with respect to `vi`, `vj`, `vk`.
pub fn angle_cosine_grad(
    vi: &[f64],
    vj: &[f64],
    vk: &[f64],
) -> Result<(f64, [Vec<f64>; 3]), LossError> {
    let (u, nu) = unit_diff(vi, vj)?;
    let (w, nw) = unit_diff(vk, vj)?;
    let phi: f64 = u.iter().zip(&w).map(|(a, b)| a * b).sum();
    let gi: Vec<f64> = u.iter().zip(&w).map(|(a, b)| (b - phi * a) / nu).collect();
    let gk: Vec<f64> = u.iter().zip(&w).map(|(a, b)| (a - phi * b) / nw).collect();
    let gj: Vec<f64> = gi.iter().zip(&gk).map(|(a, b)| -(a + b)).collect();
    Ok((phi, [gi, gj, gk]))
}

fn check_aligned(student: &DescriptorBatch, teacher: &DescriptorBatch) -> Result<(), LossError> {
    if student.dim() != teacher.dim() {
        return Err(LossError::DimensionMismatch(student.dim(), teacher.dim()));
    }
    if student.sample_ids != teacher.sample_ids {
        return Err(LossError::Misaligned);
    }
    Ok(())
}

fn add_row(grad: &mut Array2<f64>, row: usize, scale: f64, g: &[f64]) {
    for (dst, v) in grad.row_mut(row).iter_mut().zip(g) {
        *dst += scale * v;
    }
}

/// Structure-aware angular distillation: mean over tuples of
/// `max(huber(phi_teacher - phi_student) - margin, 0)`, with the anchor of
/// each triplet as the angle's vertex. Tuples whose angle is undefined in
/// either batch are skipped and counted in `skipped`.
pub fn sa_loss(
    student: &DescriptorBatch,
    teacher: &DescriptorBatch,
    tuples: &[Triplet],
    spec: &DistillSpec,
) -> Result<LossResult, LossError> {
    check_aligned(student, teacher)?;
    if tuples.is_empty() {
        return Err(LossError::EmptyTupleSet);
    }
    check_indices(
        student.len(),
        tuples.iter().flat_map(|t| [t.anchor, t.positive, t.negative]),
    )?;
    let mut grad = Array2::<f64>::zeros((student.len(), student.dim()));
    let mut total = 0.0;
    let mut terms = 0usize;
    let mut skipped = 0usize;
    for t in tuples {
        let (i, j, k) = (t.positive, t.anchor, t.negative);
        let teacher_phi = match angle_cosine(teacher.row(i), teacher.row(j), teacher.row(k)) {
            Ok(phi) => phi,
            Err(_) => {
                skipped += 1;
                continue;
            }
        };
        let (student_phi, [gi, gj, gk]) =
            match angle_cosine_grad(student.row(i), student.row(j), student.row(k)) {
                Ok(r) => r,
                Err(_) => {
                    skipped += 1;
                    continue;
                }
            };
        terms += 1;
        let residual = teacher_phi - student_phi;
        let penalty = huber(residual) - spec.margin;
        if penalty > 0.0 {
            total += penalty;
            // d/d(phi_student) of huber(phi_t - phi_s) is -huber'(residual).
            let dphi = -huber_grad(residual);
            add_row(&mut grad, i, dphi, &gi);
            add_row(&mut grad, j, dphi, &gj);
            add_row(&mut grad, k, dphi, &gk);
        }
    }
    if terms == 0 {
        let mut r = LossResult::zero(student.len(), student.dim());
        r.skipped = skipped;
        return Ok(r);
    }
    let scale = 1.0 / terms as f64;
    grad.mapv_inplace(|g| g * scale);
    Ok(LossResult {
        value: total * scale,
        grad,
        terms,
        skipped,
    })
}

/// `(anchor, positive)` and `(anchor, negative)` of every triplet.
pub fn triplet_pairs(triplets: &[Triplet]) -> Vec<(usize, usize)> {
    triplets
        .iter()
        .flat_map(|t| [(t.anchor, t.positive), (t.anchor, t.negative)])
        .collect()
}

/// Pairwise-distance baseline: mean over pairs of
/// `huber(|t_i - t_j| - |s_i - s_j|)`.
pub fn euclid_distill(
    student: &DescriptorBatch,
    teacher: &DescriptorBatch,
    pairs: &[(usize, usize)],
    _spec: &DistillSpec,
) -> Result<LossResult, LossError> {
    check_aligned(student, teacher)?;
    if pairs.is_empty() {
        return Err(LossError::EmptyTupleSet);
    }
    check_indices(student.len(), pairs.iter().flat_map(|&(a, b)| [a, b]))?;
    let mut grad = Array2::<f64>::zeros((student.len(), student.dim()));
    let mut total = 0.0;
    let dist = |b: &DescriptorBatch, i: usize, j: usize| {
        b.row(i)
            .iter()
            .zip(b.row(j))
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt()
    };
    for &(i, j) in pairs {
        let dt = dist(teacher, i, j);
        let ds = dist(student, i, j);
        let residual = dt - ds;
        total += huber(residual);
        if ds > 0.0 {
            let coef = -huber_grad(residual) / ds;
            let diff: Vec<f64> = student
                .row(i)
                .iter()
                .zip(student.row(j))
                .map(|(x, y)| x - y)
                .collect();
            add_row(&mut grad, i, coef, &diff);
            add_row(&mut grad, j, -coef, &diff);
        }
    }
    let scale = 1.0 / pairs.len() as f64;
    grad.mapv_inplace(|g| g * scale);
    Ok(LossResult {
        value: total * scale,
        grad,
        terms: pairs.len(),
        skipped: 0,
    })
}

/// Position baseline: mean over rows of `|s - t|^2`.
pub fn point_distill(
    student: &DescriptorBatch,
    teacher: &DescriptorBatch,
    _spec: &DistillSpec,
) -> Result<LossResult, LossError> {
    check_aligned(student, teacher)?;
    let rows = student.len();
    if rows == 0 {
        return Ok(LossResult::zero(0, student.dim()));
    }
    let diff = &student.descriptors - &teacher.descriptors;
    let value = diff.iter().map(|v| v * v).sum::<f64>() / rows as f64;
    let grad = diff.mapv(|v| 2.0 * v / rows as f64);
    Ok(LossResult {
        value,
        grad,
        terms: rows,
        skipped: 0,
    })
}

/// Dispatches on `spec.kind`; `None` yields a zero loss.
pub fn distill_loss(
    student: &DescriptorBatch,
    teacher: &DescriptorBatch,
    triplets: &[Triplet],
    spec: &DistillSpec,
) -> Result<LossResult, LossError> {
    match spec.kind {
        DistillKind::Angular => sa_loss(student, teacher, triplets, spec),
        DistillKind::Euclidean => euclid_distill(student, teacher, &triplet_pairs(triplets), spec),
        DistillKind::Point => point_distill(student, teacher, spec),
        DistillKind::None => Ok(LossResult::zero(student.len(), student.dim())),
    }
}
