use serde::{Deserialize, Serialize};

use super::DataError;

/// Planar position of a scan in meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoLocation {
    pub x: f64,
    pub y: f64,
}

impl GeoLocation {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn distance(&self, other: &GeoLocation) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

/// A point cloud in normalized coordinates.
///
/// Clouds built through [`PointCloud::new`] or [`PointCloud::normalize`]
/// hold at least [`PointCloud::MIN_POINTS`] points with every coordinate in
/// `[-1, 1]`. Augmented clouds are rigid transforms of such clouds and may
/// extend to `sqrt(2)` in the horizontal plane.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    points: Vec<[f64; 3]>,
}

impl PointCloud {
    pub const MIN_POINTS: usize = 8;

    /// Wraps already-normalized coordinates, rejecting out-of-range or
    /// non-finite values.
    pub fn new(points: Vec<[f64; 3]>) -> Result<Self, DataError> {
        if points.len() < Self::MIN_POINTS {
            return Err(DataError::DegenerateCloud(format!(
                "{} points, need at least {}",
                points.len(),
                Self::MIN_POINTS
            )));
        }
        for p in &points {
            if p.iter().any(|c| !c.is_finite() || c.abs() > 1.0) {
                return Err(DataError::DegenerateCloud(format!(
                    "coordinate {p:?} outside [-1, 1]"
                )));
            }
        }
        Ok(Self { points })
    }

    pub(crate) fn from_transformed(points: Vec<[f64; 3]>) -> Self {
        Self { points }
    }

    /// Centers the cloud on its bounding-box midpoint and applies one
    /// uniform scale so the largest absolute coordinate becomes 1.
    pub fn normalize(raw: &[[f64; 3]]) -> Result<Self, DataError> {
        if raw.len() < Self::MIN_POINTS {
            return Err(DataError::DegenerateCloud(format!(
                "{} points, need at least {}",
                raw.len(),
                Self::MIN_POINTS
            )));
        }
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in raw {
            for a in 0..3 {
                if !p[a].is_finite() {
                    return Err(DataError::DegenerateCloud("non-finite coordinate".into()));
                }
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        let mid = [0, 1, 2].map(|a| 0.5 * (lo[a] + hi[a]));
        let half = (0..3).map(|a| 0.5 * (hi[a] - lo[a])).fold(0.0, f64::max);
        if half <= 0.0 {
            return Err(DataError::DegenerateCloud("all points coincide".into()));
        }
        let points = raw
            .iter()
            .map(|p| [0, 1, 2].map(|a| ((p[a] - mid[a]) / half).clamp(-1.0, 1.0)))
            .collect();
        Ok(Self { points })
    }

    pub fn points(&self) -> &[[f64; 3]] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn max_abs_coordinate(&self) -> f64 {
        self.points
            .iter()
            .flat_map(|p| p.iter())
            .fold(0.0, |m, c| m.max(c.abs()))
    }

    /// Rounds every coordinate to the nearest `f32`, the precision of the
    /// on-disk cloud format.
    pub fn quantized_f32(&self) -> Self {
        Self {
            points: self
                .points
                .iter()
                .map(|p| p.map(|c| f64::from(c as f32)))
                .collect(),
        }
    }
}
