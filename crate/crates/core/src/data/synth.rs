//! Synthetic multi-domain place-recognition benchmark.
//!
//! Places sit on a jittered grid inside a square area. Every place owns a
//! fixed constellation of Gaussian landmark blobs from which a base point set
//! is drawn once. A traversal visits every place: the sensor stands within
//! `position_jitter` meters of the place center, sees a random subset of the
//! base points with `noise_sigma` jitter, and faces a heading drawn from
//! `[-heading_jitter, heading_jitter]`. The first `train_traversals` visits
//! form the training split, the next one the test database and the remaining
//! `revisit_count - 1` the test queries.
//!
//! Domains differ through their landmark statistics (count, blob scale,
//! vertical extent) and sensor noise.

use std::sync::Arc;

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{DataError, DomainDataset, GeoLocation, PointCloud, Sample, ThresholdSpec};
use crate::seed;

/// Meters of world space mapped onto one unit of local cloud coordinates.
const VIEW_RADIUS_M: f64 = 30.0;
/// Sample ids are `domain_id * ID_STRIDE + ordinal`.
pub const ID_STRIDE: u64 = 1_000_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticDomainSpec {
    pub name: String,
    pub domain_id: u32,
    pub seed: u64,
    pub num_places: usize,
    /// Side length of the square area, meters.
    pub area_side: f64,
    pub landmarks_per_place: usize,
    /// Landmark blob standard deviation in local units.
    pub landmark_scale: f64,
    /// Vertical extent of landmark centers in local units.
    pub landmark_height: f64,
    pub noise_sigma: f64,
    pub revisit_count: usize,
    pub train_traversals: usize,
    pub points_per_cloud: usize,
    /// Fraction of a place's base points seen on one visit, in (0, 1].
    pub visibility: f64,
    /// Radians.
    pub heading_jitter: f64,
    /// Meters.
    pub position_jitter: f64,
    pub thresholds: ThresholdSpec,
}

impl Default for SyntheticDomainSpec {
    fn default() -> Self {
        Self {
            name: "synthetic".into(),
            domain_id: 0,
            seed: 0,
            num_places: 32,
            area_side: 800.0,
            landmarks_per_place: 6,
            landmark_scale: 0.1,
            landmark_height: 0.3,
            noise_sigma: 0.02,
            revisit_count: 3,
            train_traversals: 4,
            points_per_cloud: 256,
            visibility: 0.5,
            heading_jitter: 0.3,
            position_jitter: 2.5,
            thresholds: ThresholdSpec::default(),
        }
    }
}

impl SyntheticDomainSpec {
    fn base_points(&self) -> usize {
        (self.points_per_cloud as f64 / self.visibility).ceil() as usize
    }

    fn grid_side(&self) -> usize {
        (self.num_places as f64).sqrt().ceil() as usize
    }

    pub fn validate(&self) -> Result<(), DataError> {
        self.thresholds.validate()?;
        let nonneg = |v: f64| v.is_finite() && v >= 0.0;
        if self.num_places < 4 {
            return Err(DataError::invalid("num_places", "must be at least 4"));
        }
        if self.revisit_count < 2 {
            return Err(DataError::invalid("revisit_count", "must be at least 2"));
        }
        if self.train_traversals < 2 {
            return Err(DataError::invalid("train_traversals", "must be at least 2"));
        }
        if self.landmarks_per_place == 0 {
            return Err(DataError::invalid("landmarks_per_place", "must be at least 1"));
        }
        if !(self.landmark_scale.is_finite() && self.landmark_scale > 0.0) {
            return Err(DataError::invalid("landmark_scale", "must be positive"));
        }
        if !nonneg(self.landmark_height) {
            return Err(DataError::invalid("landmark_height", "must be non-negative"));
        }
        if !nonneg(self.noise_sigma) {
            return Err(DataError::invalid("noise_sigma", "must be non-negative"));
        }
        if !nonneg(self.heading_jitter) {
            return Err(DataError::invalid("heading_jitter", "must be non-negative"));
        }
        if !(self.visibility > 0.0 && self.visibility <= 1.0) {
            return Err(DataError::invalid("visibility", "must lie in (0, 1]"));
        }
        if self.points_per_cloud < PointCloud::MIN_POINTS {
            return Err(DataError::invalid("points_per_cloud", "must be at least 8"));
        }
        // Same-place visits must be training positives.
        let spread = 2.0 * std::f64::consts::SQRT_2 * self.position_jitter;
        if !nonneg(self.position_jitter) || spread >= self.thresholds.pos_train.min(self.thresholds.pos_test) {
            return Err(DataError::invalid(
                "position_jitter",
                "same-place visits would fall outside the positive radii",
            ));
        }
        // Different places must be negatives and never count as test matches.
        let min_gap = 0.8 * self.area_side / self.grid_side() as f64 - spread;
        if !self.area_side.is_finite() || min_gap <= self.thresholds.neg_train.max(self.thresholds.pos_test) {
            return Err(DataError::invalid(
                "area_side",
                format!("places closer than the negative radius (gap {min_gap:.1} m)"),
            ));
        }
        Ok(())
    }
}

struct Landmark {
    center: [f64; 3],
    sigma: [f64; 3],
}

struct Place {
    center: GeoLocation,
    base_points: Vec<[f64; 3]>,
}

fn gauss(rng: &mut seed::Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn build_places(spec: &SyntheticDomainSpec) -> Vec<Place> {
    let g = spec.grid_side();
    let spacing = spec.area_side / g as f64;
    let mut rng = seed::derived_rng(spec.seed, "synth-places", &[]);
    (0..spec.num_places)
        .map(|i| {
            let (row, col) = (i / g, i % g);
            let center = GeoLocation::new(
                (col as f64 + 0.5 + rng.random_range(-0.1..0.1)) * spacing,
                (row as f64 + 0.5 + rng.random_range(-0.1..0.1)) * spacing,
            );
            let landmarks: Vec<Landmark> = (0..spec.landmarks_per_place)
                .map(|_| Landmark {
                    center: [
                        rng.random_range(-1.0..1.0),
                        rng.random_range(-1.0..1.0),
                        rng.random_range(0.0..=spec.landmark_height),
                    ],
                    sigma: [0, 1, 2].map(|_| spec.landmark_scale * rng.random_range(0.5..1.5)),
                })
                .collect();
            let base_points = (0..spec.base_points())
                .map(|k| {
                    let lm = &landmarks[k % landmarks.len()];
                    [0, 1, 2].map(|a| lm.center[a] + lm.sigma[a] * gauss(&mut rng))
                })
                .collect();
            Place { center, base_points }
        })
        .collect()
}

fn visit(
    spec: &SyntheticDomainSpec,
    place: &Place,
    rng: &mut seed::Rng,
) -> Result<(PointCloud, GeoLocation), DataError> {
    let pj = spec.position_jitter;
    let (dx, dy) = if pj > 0.0 {
        (rng.random_range(-pj..=pj), rng.random_range(-pj..=pj))
    } else {
        (0.0, 0.0)
    };
    let location = GeoLocation::new(place.center.x + dx, place.center.y + dy);
    let heading = if spec.heading_jitter > 0.0 {
        rng.random_range(-spec.heading_jitter..=spec.heading_jitter)
    } else {
        0.0
    };
    let (s, c) = heading.sin_cos();
    let (ox, oy) = (dx / VIEW_RADIUS_M, dy / VIEW_RADIUS_M);
    let mut picked = if place.base_points.len() == spec.points_per_cloud {
        (0..spec.points_per_cloud).collect()
    } else {
        sample_indices(rng, place.base_points.len(), spec.points_per_cloud).into_vec()
    };
    picked.sort_unstable();
    let raw: Vec<[f64; 3]> = picked
        .into_iter()
        .map(|k| {
            let b = place.base_points[k];
            let p = [0, 1, 2].map(|a| b[a] + spec.noise_sigma * gauss(rng));
            let (x, y) = (p[0] - ox, p[1] - oy);
            [c * x + s * y, -s * x + c * y, p[2]]
        })
        .collect();
    Ok((PointCloud::normalize(&raw)?.quantized_f32(), location))
}

/// Generates one domain. Identical specs give identical datasets.
pub fn generate_domain(spec: &SyntheticDomainSpec) -> Result<DomainDataset, DataError> {
    spec.validate()?;
    let places = build_places(spec);
    let mut train = Vec::new();
    let mut database = Vec::new();
    let mut queries = Vec::new();
    let mut next_id = u64::from(spec.domain_id) * ID_STRIDE;
    let traversals = spec.train_traversals + spec.revisit_count;
    for t in 0..traversals {
        let mut rng = seed::derived_rng(spec.seed, "synth-traversal", &[t as u64]);
        for place in &places {
            let (cloud, location) = visit(spec, place, &mut rng)?;
            let sample = Sample {
                cloud: Arc::new(cloud),
                location,
                domain_id: spec.domain_id,
                sample_id: next_id,
            };
            next_id += 1;
            if t < spec.train_traversals {
                train.push(sample);
            } else if t == spec.train_traversals {
                database.push(sample);
            } else {
                queries.push(sample);
            }
        }
    }
    let dataset = DomainDataset {
        name: spec.name.clone(),
        domain_id: spec.domain_id,
        train,
        test_database: database,
        test_queries: queries,
        thresholds: spec.thresholds,
    };
    let uncovered = dataset.uncovered_queries();
    if uncovered > 0 {
        return Err(DataError::invalid(
            "thresholds.pos_test",
            format!("{uncovered} queries have no database match"),
        ));
    }
    Ok(dataset)
}

/// Four training domains with distinct landmark statistics.
pub fn default_domain_specs() -> Vec<SyntheticDomainSpec> {
    let base = SyntheticDomainSpec::default();
    vec![
        SyntheticDomainSpec {
            name: "blocks".into(),
            domain_id: 0,
            seed: 101,
            ..base.clone()
        },
        SyntheticDomainSpec {
            name: "clutter".into(),
            domain_id: 1,
            seed: 202,
            landmarks_per_place: 14,
            landmark_scale: 0.05,
            noise_sigma: 0.03,
            ..base.clone()
        },
        SyntheticDomainSpec {
            name: "towers".into(),
            domain_id: 2,
            seed: 303,
            landmarks_per_place: 4,
            landmark_scale: 0.15,
            landmark_height: 0.8,
            ..base.clone()
        },
        SyntheticDomainSpec {
            name: "sparse".into(),
            domain_id: 3,
            seed: 404,
            landmarks_per_place: 3,
            landmark_scale: 0.08,
            noise_sigma: 0.04,
            ..base
        },
    ]
}

/// A domain no default training spec resembles, for zero-shot evaluation.
pub fn default_holdout_spec() -> SyntheticDomainSpec {
    SyntheticDomainSpec {
        name: "holdout".into(),
        domain_id: 9,
        seed: 909,
        landmarks_per_place: 9,
        landmark_scale: 0.12,
        landmark_height: 0.5,
        noise_sigma: 0.025,
        thresholds: ThresholdSpec {
            pos_train: 10.0,
            neg_train: 50.0,
            pos_test: 3.0,
        },
        position_jitter: 1.0,
        ..SyntheticDomainSpec::default()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SyntheticDomainSpec {
        SyntheticDomainSpec {
            num_places: 8,
            points_per_cloud: 32,
            ..SyntheticDomainSpec::default()
        }
    }

    #[test]
    fn deterministic_given_seed() {
        let a = generate_domain(&small()).unwrap();
        let b = generate_domain(&small()).unwrap();
        assert_eq!(a, b);
        let c = generate_domain(&SyntheticDomainSpec { seed: 1, ..small() }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn query_count_bookkeeping() {
        let spec = SyntheticDomainSpec {
            num_places: 32,
            revisit_count: 3,
            points_per_cloud: 16,
            ..SyntheticDomainSpec::default()
        };
        let d = generate_domain(&spec).unwrap();
        assert_eq!(d.test_queries.len(), 32 * 2);
        assert_eq!(d.test_database.len(), 32);
        assert_eq!(d.train.len(), 32 * spec.train_traversals);
        d.validate().unwrap();
    }

    #[test]
    fn noiseless_revisit_matches_database_up_to_heading() {
        let spec = SyntheticDomainSpec {
            noise_sigma: 0.0,
            revisit_count: 2,
            visibility: 1.0,
            heading_jitter: 0.0,
            ..small()
        };
        let d = generate_domain(&spec).unwrap();
        assert_eq!(d.test_queries.len(), d.test_database.len());
        // Position offsets are pure translations, removed by normalization.
        for (q, db) in d.test_queries.iter().zip(&d.test_database) {
            for (x, y) in q.cloud.points().iter().zip(db.cloud.points()) {
                for k in 0..3 {
                    assert!((x[k] - y[k]).abs() < 1e-6, "{x:?} vs {y:?}");
                }
            }
        }

        // With heading jitter the clouds differ by a yaw rotation followed by
        // a uniform rescale, so all pairwise distance ratios agree.
        let d = generate_domain(&SyntheticDomainSpec {
            heading_jitter: 1.0,
            ..spec
        })
        .unwrap();
        let dist = |c: &PointCloud, i: usize, j: usize| {
            let (u, v) = (c.points()[i], c.points()[j]);
            ((u[0] - v[0]).powi(2) + (u[1] - v[1]).powi(2) + (u[2] - v[2]).powi(2)).sqrt()
        };
        let (a, b) = (&d.test_queries[0].cloud, &d.test_database[0].cloud);
        let ratio = dist(a, 0, 1) / dist(b, 0, 1);
        for i in 0..a.len() {
            for j in (i + 1)..a.len() {
                let r = dist(a, i, j) / dist(b, i, j);
                assert!((r - ratio).abs() < 1e-4 * ratio.max(1.0), "{r} vs {ratio}");
            }
        }
    }

    #[test]
    fn invalid_specs_name_the_field() {
        let err = generate_domain(&SyntheticDomainSpec {
            num_places: 1,
            ..small()
        })
        .unwrap_err();
        assert!(err.to_string().contains("num_places"));
        let err = generate_domain(&SyntheticDomainSpec {
            revisit_count: 1,
            ..small()
        })
        .unwrap_err();
        assert!(err.to_string().contains("revisit_count"));
        let err = generate_domain(&SyntheticDomainSpec {
            area_side: 50.0,
            ..small()
        })
        .unwrap_err();
        assert!(err.to_string().contains("area_side"));
    }

    #[test]
    fn default_specs_are_valid_and_distinct() {
        let specs = default_domain_specs();
        assert_eq!(specs.len(), 4);
        for s in &specs {
            s.validate().unwrap();
        }
        default_holdout_spec().validate().unwrap();
    }
}
