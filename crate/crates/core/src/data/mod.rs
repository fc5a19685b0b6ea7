//! Point clouds, geo-tagged samples and per-domain datasets.

mod augment;
mod cloud;
pub mod io;
mod pairs;
mod synth;

use std::collections::HashSet;
use std::path::PathBuf;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use augment::{augment, augment_with, AugmentDraw, AugmentSpec};
pub use cloud::{GeoLocation, PointCloud};
pub use pairs::{mine_pairs, mine_pool_pairs, PairIndex, GRID_INDEX_THRESHOLD};
pub use synth::{default_domain_specs, default_holdout_spec, generate_domain, SyntheticDomainSpec, ID_STRIDE};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("degenerate cloud: {0}")]
    DegenerateCloud(String),
    #[error("invalid spec: {field}: {reason}")]
    InvalidSpec { field: String, reason: String },
    #[error("format error in {file} at byte {offset}: {reason}")]
    Format {
        file: PathBuf,
        offset: u64,
        reason: String,
    },
    #[error("index {index} references missing cloud file {file}")]
    MissingIndexEntry { index: PathBuf, file: PathBuf },
    #[error("duplicate sample id {0}")]
    DuplicateSampleId(u64),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl DataError {
    pub(crate) fn invalid(field: &str, reason: impl Into<String>) -> Self {
        DataError::InvalidSpec {
            field: field.to_string(),
            reason: reason.into(),
        }
    }
}

/// Distance radii in meters deciding positives/negatives during training
/// and successful retrievals during testing.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThresholdSpec {
    pub pos_train: f64,
    pub neg_train: f64,
    pub pos_test: f64,
}

impl Default for ThresholdSpec {
    fn default() -> Self {
        Self {
            pos_train: 10.0,
            neg_train: 50.0,
            pos_test: 25.0,
        }
    }
}

impl ThresholdSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        let finite = self.pos_train.is_finite() && self.neg_train.is_finite() && self.pos_test.is_finite();
        if !finite || self.pos_train <= 0.0 {
            return Err(DataError::invalid("thresholds.pos_train", "must be a positive number"));
        }
        if self.neg_train <= self.pos_train {
            return Err(DataError::invalid(
                "thresholds.neg_train",
                "must be greater than pos_train",
            ));
        }
        if self.pos_test <= 0.0 {
            return Err(DataError::invalid("thresholds.pos_test", "must be positive"));
        }
        Ok(())
    }
}

/// One geo-tagged point cloud belonging to a domain.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub cloud: Arc<PointCloud>,
    pub location: GeoLocation,
    pub domain_id: u32,
    pub sample_id: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Db,
    Query,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Db => "db",
            Split::Query => "query",
        }
    }
}

/// A training environment: its train split plus a held-out retrieval
/// benchmark (database and query traversals).
#[derive(Debug, Clone, PartialEq)]
pub struct DomainDataset {
    pub name: String,
    pub domain_id: u32,
    pub train: Vec<Sample>,
    pub test_database: Vec<Sample>,
    pub test_queries: Vec<Sample>,
    pub thresholds: ThresholdSpec,
}

impl DomainDataset {
    pub fn samples(&self, split: Split) -> &[Sample] {
        match split {
            Split::Train => &self.train,
            Split::Db => &self.test_database,
            Split::Query => &self.test_queries,
        }
    }

    pub fn all_samples(&self) -> impl Iterator<Item = (Split, &Sample)> {
        [Split::Train, Split::Db, Split::Query]
            .into_iter()
            .flat_map(move |s| self.samples(s).iter().map(move |x| (s, x)))
    }

    /// Checks id uniqueness across splits and threshold sanity.
    pub fn validate(&self) -> Result<(), DataError> {
        self.thresholds.validate()?;
        let mut seen = HashSet::new();
        for (_, s) in self.all_samples() {
            if !seen.insert(s.sample_id) {
                return Err(DataError::DuplicateSampleId(s.sample_id));
            }
        }
        Ok(())
    }

    /// Number of test queries without any database entry inside `pos_test`.
    pub fn uncovered_queries(&self) -> usize {
        self.test_queries
            .iter()
            .filter(|q| {
                !self
                    .test_database
                    .iter()
                    .any(|d| q.location.distance(&d.location) <= self.thresholds.pos_test)
            })
            .count()
    }

    pub fn find(&self, sample_id: u64) -> Option<&Sample> {
        self.all_samples().map(|(_, s)| s).find(|s| s.sample_id == sample_id)
    }
}
