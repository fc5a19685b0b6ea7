use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::PointCloud;
use crate::seed;

/// Random yaw rotation plus independent x/y mirror flips.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentSpec {
    /// Yaw is drawn uniformly from `[-max_yaw, max_yaw]`.
    pub max_yaw: f64,
    pub flip_probability: f64,
}

impl Default for AugmentSpec {
    fn default() -> Self {
        Self {
            max_yaw: PI,
            flip_probability: 0.5,
        }
    }
}

/// One concrete realization of the augmentation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentDraw {
    pub yaw: f64,
    pub flip_x: bool,
    pub flip_y: bool,
}

impl AugmentDraw {
    pub const IDENTITY: AugmentDraw = AugmentDraw {
        yaw: 0.0,
        flip_x: false,
        flip_y: false,
    };

    pub fn sample(spec: &AugmentSpec, seed: u64) -> Self {
        let mut rng = seed::rng(seed);
        let yaw = if spec.max_yaw > 0.0 {
            rng.random_range(-spec.max_yaw..=spec.max_yaw)
        } else {
            0.0
        };
        Self {
            yaw,
            flip_x: rng.random_bool(spec.flip_probability),
            flip_y: rng.random_bool(spec.flip_probability),
        }
    }
}

pub fn augment(cloud: &PointCloud, spec: &AugmentSpec, seed: u64) -> PointCloud {
    augment_with(cloud, &AugmentDraw::sample(spec, seed))
}

/// Mirrors first, then rotates about the vertical axis. The transform is
/// rigid; only values within rounding distance of the unit bound are clamped.
pub fn augment_with(cloud: &PointCloud, draw: &AugmentDraw) -> PointCloud {
    const EPS: f64 = 1e-12;
    let (s, c) = draw.yaw.sin_cos();
    let fx = if draw.flip_x { -1.0 } else { 1.0 };
    let fy = if draw.flip_y { -1.0 } else { 1.0 };
    let snap = |v: f64| {
        if v.abs() > 1.0 && v.abs() <= 1.0 + EPS {
            v.signum()
        } else {
            v
        }
    };
    let points = cloud
        .points()
        .iter()
        .map(|p| {
            let x = fx * p[0];
            let y = fy * p[1];
            [snap(c * x - s * y), snap(s * x + c * y), p[2]]
        })
        .collect();
    PointCloud::from_transformed(points)
}
