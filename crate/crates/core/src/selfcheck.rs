//! Built-in numerical self-checks: finite-difference gradient checks,
//! invariance properties of the distillation losses, the relaxation
//! schedule and the metric oracles.
//!
//! The loss functions under test are injectable through [`LossKit`] so a
//! deliberately broken implementation can be shown to fail by name.

use std::time::Instant;

use ndarray::{array, Array2};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::data::{GeoLocation, PointCloud};
use crate::encoder::{DescriptorBatch, EncoderConfig, EncoderParams};
use crate::eval::{forgetting, mean_recall_at_1, recall_at_n, RecallMatrix};
use crate::losses::{
    angle_cosine, euclid_distill, huber, omega, point_distill, sa_loss, triplet_batch_loss, triplet_pairs,
    DistillKind, DistillSpec, LossError, LossResult, Triplet, TripletSpec,
};
use crate::seed;

pub type TripletFn = fn(&DescriptorBatch, &[Triplet], &TripletSpec) -> Result<LossResult, LossError>;
pub type TupleFn = fn(&DescriptorBatch, &DescriptorBatch, &[Triplet], &DistillSpec) -> Result<LossResult, LossError>;
pub type PairFn =
    fn(&DescriptorBatch, &DescriptorBatch, &[(usize, usize)], &DistillSpec) -> Result<LossResult, LossError>;
pub type RowFn = fn(&DescriptorBatch, &DescriptorBatch, &DistillSpec) -> Result<LossResult, LossError>;

/// The losses exercised by the suite.
#[derive(Clone, Copy)]
pub struct LossKit {
    pub triplet: TripletFn,
    pub sa: TupleFn,
    pub euclid: PairFn,
    pub point: RowFn,
}

impl Default for LossKit {
    fn default() -> Self {
        Self {
            triplet: triplet_batch_loss,
            sa: sa_loss,
            euclid: euclid_distill,
            point: point_distill,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SelfcheckReport {
    pub checks: Vec<CheckResult>,
    pub seconds: f64,
}

impl SelfcheckReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CheckResult> {
        self.checks.iter().filter(|c| !c.passed)
    }
}

const INSTANCES: usize = 50;
const STEP: f64 = 1e-5;
const GRAD_TOLERANCE: f64 = 1e-6;
/// Instances closer than this to a kink are resampled.
const KINK_CLEARANCE: f64 = 1e-3;

pub fn run() -> SelfcheckReport {
    run_with(&LossKit::default())
}

pub fn run_with(kit: &LossKit) -> SelfcheckReport {
    let started = Instant::now();
    let checks = vec![
        check("triplet gradient", || triplet_gradient(kit)),
        check("sa_loss gradient", || sa_gradient(kit)),
        check("euclid_distill gradient", || euclid_gradient(kit)),
        check("point_distill gradient", || point_gradient(kit)),
        check("encoder gradient", encoder_gradient),
        check("sa_loss similarity invariance", || sa_invariance(kit)),
        check("euclid_distill scale sensitivity", || euclid_scale_sensitivity(kit)),
        check("point_distill translation sensitivity", || point_translation_sensitivity(kit)),
        check("relaxation schedule", relaxation_schedule),
        check("metric oracles", metric_oracles),
    ];
    SelfcheckReport {
        checks,
        seconds: started.elapsed().as_secs_f64(),
    }
}

fn check(name: &'static str, f: impl FnOnce() -> Result<String, String>) -> CheckResult {
    match f() {
        Ok(detail) => CheckResult {
            name,
            passed: true,
            detail,
        },
        Err(detail) => CheckResult {
            name,
            passed: false,
            detail,
        },
    }
}

fn gaussian_matrix(rng: &mut seed::Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.sample::<f64, _>(StandardNormal))
}

fn batch(m: Array2<f64>) -> DescriptorBatch {
    DescriptorBatch::anonymous(m)
}

/// Largest componentwise error, relative to the larger gradient magnitude.
fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let scale = analytic
        .iter()
        .chain(numeric)
        .fold(0.0f64, |m, v| m.max(v.abs()));
    let err = analytic
        .iter()
        .zip(numeric)
        .fold(0.0f64, |m, (a, n)| m.max((a - n).abs()));
    if scale < 1e-12 {
        err
    } else {
        err / scale
    }
}

/// Central differences of `f` over every entry of `x`.
fn numeric_gradient(x: &Array2<f64>, f: impl Fn(&Array2<f64>) -> f64) -> Vec<f64> {
    let mut probe = x.clone();
    let mut out = Vec::with_capacity(x.len());
    for idx in 0..x.len() {
        let orig = probe.as_slice().unwrap()[idx];
        probe.as_slice_mut().unwrap()[idx] = orig + STEP;
        let up = f(&probe);
        probe.as_slice_mut().unwrap()[idx] = orig - STEP;
        let down = f(&probe);
        probe.as_slice_mut().unwrap()[idx] = orig;
        out.push((up - down) / (2.0 * STEP));
    }
    out
}

fn random_triplets(rng: &mut seed::Rng, rows: usize, count: usize) -> Vec<Triplet> {
    (0..count)
        .map(|_| {
            let a = rng.random_range(0..rows);
            let mut p = rng.random_range(0..rows);
            while p == a {
                p = rng.random_range(0..rows);
            }
            let mut n = rng.random_range(0..rows);
            while n == a || n == p {
                n = rng.random_range(0..rows);
            }
            Triplet::new(a, p, n)
        })
        .collect()
}

/// Runs `instance` on seeded draws until `INSTANCES` non-kink instances have
/// been checked; returns the worst relative error.
fn gradient_sweep(
    label: &str,
    mut instance: impl FnMut(&mut seed::Rng) -> Result<Option<(Vec<f64>, Vec<f64>)>, LossError>,
) -> Result<String, String> {
    let mut worst = 0.0f64;
    let mut checked = 0;
    let mut draws = 0u64;
    while checked < INSTANCES {
        if draws > 20 * INSTANCES as u64 {
            return Err(format!("{label}: too many instances near kinks"));
        }
        let mut rng = seed::derived_rng(7, label, &[draws]);
        draws += 1;
        let Some((analytic, numeric)) = instance(&mut rng).map_err(|e| format!("{label}: {e}"))? else {
            continue;
        };
        let err = relative_error(&analytic, &numeric);
        worst = worst.max(err);
        if !(err < GRAD_TOLERANCE) {
            return Err(format!("instance {draws}: relative error {err:.3e}"));
        }
        checked += 1;
    }
    Ok(format!("{checked} instances, max relative error {worst:.2e}"))
}

fn triplet_gradient(kit: &LossKit) -> Result<String, String> {
    let spec = TripletSpec::default();
    gradient_sweep("triplet", |rng| {
        let x = gaussian_matrix(rng, 6, 5);
        let t = random_triplets(rng, 6, 4);
        let b = batch(x.clone());
        let near_hinge = t.iter().any(|t| {
            let d = |i: usize, j: usize| {
                b.row(i)
                    .iter()
                    .zip(b.row(j))
                    .map(|(u, v)| (u - v) * (u - v))
                    .sum::<f64>()
                    .sqrt()
            };
            (d(t.anchor, t.positive) - d(t.anchor, t.negative) + spec.margin).abs() < KINK_CLEARANCE
        });
        let r = (kit.triplet)(&b, &t, &spec)?;
        if near_hinge || r.terms == 0 {
            return Ok(None);
        }
        let numeric = numeric_gradient(&x, |m| (kit.triplet)(&batch(m.clone()), &t, &spec).unwrap().value);
        Ok(Some((r.grad.iter().copied().collect(), numeric)))
    })
}

fn sa_gradient(kit: &LossKit) -> Result<String, String> {
    let spec = DistillSpec::default();
    gradient_sweep("sa", |rng| {
        let s = gaussian_matrix(rng, 6, 5);
        let t = gaussian_matrix(rng, 6, 5);
        let tuples = random_triplets(rng, 6, 4);
        let near_kink = tuples.iter().any(|tp| {
            let phi = |m: &Array2<f64>| {
                let row = |i: usize| m.row(i).to_vec();
                angle_cosine(&row(tp.positive), &row(tp.anchor), &row(tp.negative)).unwrap_or(0.0)
            };
            let x = phi(&t) - phi(&s);
            (x.abs() - 1.0).abs() < KINK_CLEARANCE || (huber(x) - spec.margin).abs() < KINK_CLEARANCE
        });
        if near_kink {
            return Ok(None);
        }
        let teacher = batch(t);
        let r = (kit.sa)(&batch(s.clone()), &teacher, &tuples, &spec)?;
        let numeric = numeric_gradient(&s, |m| (kit.sa)(&batch(m.clone()), &teacher, &tuples, &spec).unwrap().value);
        Ok(Some((r.grad.iter().copied().collect(), numeric)))
    })
}

fn euclid_gradient(kit: &LossKit) -> Result<String, String> {
    let spec = DistillSpec {
        kind: DistillKind::Euclidean,
        ..DistillSpec::default()
    };
    gradient_sweep("euclid", |rng| {
        let s = gaussian_matrix(rng, 6, 5);
        let t = gaussian_matrix(rng, 6, 5) * 1.5;
        let pairs = triplet_pairs(&random_triplets(rng, 6, 4));
        let dist = |m: &Array2<f64>, a: usize, b: usize| (&m.row(a) - &m.row(b)).mapv(|v| v * v).sum().sqrt();
        let near_kink = pairs
            .iter()
            .any(|&(a, b)| ((dist(&t, a, b) - dist(&s, a, b)).abs() - 1.0).abs() < KINK_CLEARANCE);
        if near_kink {
            return Ok(None);
        }
        let teacher = batch(t);
        let r = (kit.euclid)(&batch(s.clone()), &teacher, &pairs, &spec)?;
        let numeric = numeric_gradient(&s, |m| (kit.euclid)(&batch(m.clone()), &teacher, &pairs, &spec).unwrap().value);
        Ok(Some((r.grad.iter().copied().collect(), numeric)))
    })
}

fn point_gradient(kit: &LossKit) -> Result<String, String> {
    let spec = DistillSpec {
        kind: DistillKind::Point,
        ..DistillSpec::default()
    };
    gradient_sweep("point", |rng| {
        let s = gaussian_matrix(rng, 6, 5);
        let teacher = batch(gaussian_matrix(rng, 6, 5));
        let r = (kit.point)(&batch(s.clone()), &teacher, &spec)?;
        let numeric = numeric_gradient(&s, |m| (kit.point)(&batch(m.clone()), &teacher, &spec).unwrap().value);
        Ok(Some((r.grad.iter().copied().collect(), numeric)))
    })
}

/// Linear probe `sum(weights * descriptors)` differentiated through the
/// encoder. Parameters whose perturbation changes a pooling winner are
/// skipped as kinks.
fn encoder_gradient() -> Result<String, String> {
    let mut worst = 0.0f64;
    let mut skipped = 0usize;
    for inst in 0..INSTANCES as u64 {
        let mut rng = seed::derived_rng(11, "encoder-fd", &[inst]);
        let config = EncoderConfig {
            hidden_dims: vec![8, 8],
            descriptor_dim: 6,
            seed: rng.random(),
            ..EncoderConfig::default()
        };
        let params = EncoderParams::init(&config).map_err(|e| e.to_string())?;
        let clouds: Vec<PointCloud> = (0..3)
            .map(|_| {
                let pts = (0..12)
                    .map(|_| [0; 3].map(|_: i32| rng.random_range(-1.0..1.0)))
                    .collect();
                PointCloud::new(pts).expect("points inside the unit cube")
            })
            .collect();
        let refs: Vec<&PointCloud> = clouds.iter().collect();
        let weights = gaussian_matrix(&mut rng, 3, 6);
        let (_, cache) = params.forward_cached(&refs).map_err(|e| e.to_string())?;
        let analytic = params.backward(&refs, &cache, &weights).map_err(|e| e.to_string())?;
        let probe = |p: &EncoderParams| -> (f64, Vec<Vec<usize>>) {
            let (d, c) = p.forward_cached(&refs).expect("finite forward");
            let winners = (0..refs.len()).map(|i| c.winners(i).to_vec()).collect();
            ((&d * &weights).sum(), winners)
        };
        let mut a = Vec::new();
        let mut n = Vec::new();
        let mut shifted = params.clone();
        for k in 0..params.len() {
            let orig = params.flat()[k];
            shifted.flat_mut()[k] = orig + STEP;
            let (up, wu) = probe(&shifted);
            shifted.flat_mut()[k] = orig - STEP;
            let (down, wd) = probe(&shifted);
            shifted.flat_mut()[k] = orig;
            if wu != wd {
                skipped += 1;
                continue;
            }
            a.push(analytic[k]);
            n.push((up - down) / (2.0 * STEP));
        }
        let err = relative_error(&a, &n);
        worst = worst.max(err);
        if !(err < GRAD_TOLERANCE) {
            return Err(format!("instance {inst}: relative error {err:.3e}"));
        }
    }
    Ok(format!(
        "{INSTANCES} instances, max relative error {worst:.2e}, {skipped} pooling kinks skipped"
    ))
}

/// Random orthogonal matrix from Gram-Schmidt on a Gaussian matrix.
pub fn random_rotation(rng: &mut seed::Rng, dim: usize) -> Array2<f64> {
    let mut q = gaussian_matrix(rng, dim, dim);
    for i in 0..dim {
        for j in 0..i {
            let proj = q.row(i).dot(&q.row(j));
            let rj = q.row(j).to_owned();
            q.row_mut(i).scaled_add(-proj, &rj);
        }
        let norm = q.row(i).dot(&q.row(i)).sqrt();
        q.row_mut(i).mapv_inplace(|v| v / norm);
    }
    q
}

fn similarity(m: &Array2<f64>, rotation: &Array2<f64>, scale: f64, shift: &[f64]) -> Array2<f64> {
    let mut out = m.dot(&rotation.t()) * scale;
    for mut row in out.rows_mut() {
        for (v, s) in row.iter_mut().zip(shift) {
            *v += s;
        }
    }
    out
}

fn sa_invariance(kit: &LossKit) -> Result<String, String> {
    let spec = DistillSpec::default();
    let mut worst = 0.0f64;
    for inst in 0..100u64 {
        let mut rng = seed::derived_rng(13, "sa-invariance", &[inst]);
        let s = gaussian_matrix(&mut rng, 8, 6);
        let teacher = batch(gaussian_matrix(&mut rng, 8, 6));
        let tuples = random_triplets(&mut rng, 8, 6);
        let rot = random_rotation(&mut rng, 6);
        let scale = rng.random_range(0.2..5.0);
        let shift: Vec<f64> = (0..6).map(|_| rng.random_range(-3.0..3.0)).collect();
        let base = (kit.sa)(&batch(s.clone()), &teacher, &tuples, &spec).map_err(|e| e.to_string())?;
        let moved = (kit.sa)(&batch(similarity(&s, &rot, scale, &shift)), &teacher, &tuples, &spec)
            .map_err(|e| e.to_string())?;
        let diff = (base.value - moved.value).abs();
        worst = worst.max(diff);
        if !(diff < 1e-9) {
            return Err(format!("instance {inst}: loss changed by {diff:.3e}"));
        }
    }
    Ok(format!("100 batches, max change {worst:.2e}"))
}

fn euclid_scale_sensitivity(kit: &LossKit) -> Result<String, String> {
    let spec = DistillSpec::default();
    let mut least = f64::INFINITY;
    for inst in 0..100u64 {
        let mut rng = seed::derived_rng(17, "euclid-scale", &[inst]);
        let s = gaussian_matrix(&mut rng, 8, 6);
        let teacher = batch(gaussian_matrix(&mut rng, 8, 6));
        let pairs = triplet_pairs(&random_triplets(&mut rng, 8, 6));
        let rot = random_rotation(&mut rng, 6);
        let scale = rng.random_range(1.5..4.0);
        let base = (kit.euclid)(&batch(s.clone()), &teacher, &pairs, &spec).map_err(|e| e.to_string())?;
        let moved = (kit.euclid)(&batch(similarity(&s, &rot, scale, &[0.0; 6])), &teacher, &pairs, &spec)
            .map_err(|e| e.to_string())?;
        let diff = (base.value - moved.value).abs();
        least = least.min(diff);
        if !(diff > 1e-6) {
            return Err(format!("instance {inst}: scaling changed the loss by only {diff:.3e}"));
        }
    }
    Ok(format!("100 batches, min change {least:.2e}"))
}

fn point_translation_sensitivity(kit: &LossKit) -> Result<String, String> {
    let spec = DistillSpec::default();
    for inst in 0..100u64 {
        let mut rng = seed::derived_rng(19, "point-shift", &[inst]);
        let s = gaussian_matrix(&mut rng, 8, 6);
        let teacher = batch(gaussian_matrix(&mut rng, 8, 6));
        let shift: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let base = (kit.point)(&batch(s.clone()), &teacher, &spec).map_err(|e| e.to_string())?;
        let moved = (kit.point)(&batch(similarity(&s, &Array2::eye(6), 1.0, &shift)), &teacher, &spec)
            .map_err(|e| e.to_string())?;
        if base.value == moved.value {
            return Err(format!("instance {inst}: translation left the loss unchanged"));
        }
    }
    Ok("100 batches".into())
}

fn relaxation_schedule() -> Result<String, String> {
    let tau = 60.0;
    let mid = omega(tau / 2.0, tau);
    if (mid - 0.5).abs() > 1e-12 {
        return Err(format!("omega(tau/2) = {mid}"));
    }
    let start = 1.0 / (1.0 + (-5.0f64).exp());
    let end = 1.0 / (1.0 + 5.0f64.exp());
    if (omega(0.0, tau) - start).abs() > 1e-12 || (omega(tau, tau) - end).abs() > 1e-12 {
        return Err("endpoint values".into());
    }
    for g in 0..60 {
        let (a, b) = (omega(g as f64, tau), omega(g as f64 + 1.0, tau));
        if !(b < a) {
            return Err(format!("not decreasing at epoch {g}"));
        }
        if (a + omega(tau - g as f64, tau) - 1.0).abs() > 1e-12 {
            return Err(format!("not symmetric at epoch {g}"));
        }
    }
    Ok("midpoint, endpoints, monotonicity, symmetry".into())
}

fn metric_oracles() -> Result<String, String> {
    let m = RecallMatrix::from_rows(
        vec!["a".into(), "b".into(), "c".into()],
        vec![vec![90.0], vec![80.0, 85.0], vec![70.0, 75.0, 88.0]],
    )
    .map_err(|e| e.to_string())?;
    let mr = mean_recall_at_1(&m).map_err(|e| e.to_string())?;
    let f = forgetting(&m).map_err(|e| e.to_string())?;
    if (mr - 233.0 / 3.0).abs() > 1e-9 || (f - 15.0).abs() > 1e-9 {
        return Err(format!("golden matrix gave mR@1 {mr}, F {f}"));
    }
    let db = array![[0.0, 0.0], [10.0, 0.0]];
    let q = array![[1.0, 0.0], [2.0, 0.0], [9.0, 0.0]];
    let here = GeoLocation::new(0.0, 0.0);
    let r = recall_at_n(
        q.view(),
        db.view(),
        &[here; 3],
        &[here, GeoLocation::new(500.0, 0.0)],
        25.0,
        1,
    )
    .map_err(|e| e.to_string())?;
    if (r.recall - 200.0 / 3.0).abs() > 1e-9 {
        return Err(format!("hand-built retrieval gave {}", r.recall));
    }
    Ok("golden recall matrix and retrieval case".into())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clean_suite_passes() {
        let report = run();
        for c in &report.checks {
            assert!(c.passed, "{}: {}", c.name, c.detail);
        }
    }

    fn flipped_sa(
        s: &DescriptorBatch,
        t: &DescriptorBatch,
        tuples: &[Triplet],
        spec: &DistillSpec,
    ) -> Result<LossResult, LossError> {
        let mut r = sa_loss(s, t, tuples, spec)?;
        r.grad.mapv_inplace(|g| -g);
        Ok(r)
    }

    #[test]
    fn sign_flip_is_caught_by_name() {
        let kit = LossKit {
            sa: flipped_sa,
            ..LossKit::default()
        };
        let report = run_with(&kit);
        let failed: Vec<&str> = report.failures().map(|c| c.name).collect();
        assert_eq!(failed, vec!["sa_loss gradient"]);
    }

    #[test]
    fn rotation_is_orthogonal() {
        let mut rng = seed::rng(1);
        let q = random_rotation(&mut rng, 5);
        let id = q.dot(&q.t());
        for ((i, j), v) in id.indexed_iter() {
            let expected = if i == j { 1.0 } else { 0.0 };
            assert!((v - expected).abs() < 1e-12);
        }
    }
}
