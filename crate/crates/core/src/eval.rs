//! Retrieval metrics: Recall@N, the step-by-domain recall matrix, mean
//! Recall@1 and forgetting.
//!
//! A query succeeds at N when one of its N nearest database descriptors
//! (squared L2, ties to the lowest database index) lies within `pos_test`
//! meters of it. Queries with no database entry in range are excluded from
//! the denominator and counted separately.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::ArrayView2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{DomainDataset, GeoLocation, Sample};
use crate::encoder::{EncoderError, EncoderParams};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("database is empty")]
    EmptyDatabase,
    #[error("no query has a database entry within {0} m")]
    NoCoveredQueries(f64),
    #[error("descriptor dimensions differ (queries {queries}, database {database})")]
    DimensionMismatch { queries: usize, database: usize },
    #[error("{descriptors} descriptors but {locations} locations")]
    LengthMismatch { descriptors: usize, locations: usize },
    #[error("forgetting is undefined for a single step")]
    UndefinedForSingleStep,
    #[error("recall matrix is empty")]
    EmptyMatrix,
    #[error("row {row} of the recall matrix: {reason}")]
    InvalidRow { row: usize, reason: String },
    #[error("N must be at least 1")]
    InvalidN,
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {reason}")]
    Format { path: PathBuf, reason: String },
}

/// Result of one Recall@N computation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RecallOutcome {
    /// Percentage of evaluated queries that succeeded.
    pub recall: f64,
    pub evaluated: usize,
    pub excluded: usize,
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn check_shapes(
    queries: ArrayView2<f64>,
    database: ArrayView2<f64>,
    query_locs: &[GeoLocation],
    db_locs: &[GeoLocation],
) -> Result<(), EvalError> {
    if database.nrows() == 0 {
        return Err(EvalError::EmptyDatabase);
    }
    if queries.ncols() != database.ncols() {
        return Err(EvalError::DimensionMismatch {
            queries: queries.ncols(),
            database: database.ncols(),
        });
    }
    for (descs, locs) in [(queries, query_locs), (database, db_locs)] {
        if descs.nrows() != locs.len() {
            return Err(EvalError::LengthMismatch {
                descriptors: descs.nrows(),
                locations: locs.len(),
            });
        }
    }
    Ok(())
}

/// Rank of the best in-radius database entry for every query: the number of
/// entries that precede it in retrieval order. `None` marks a query with no
/// entry in range.
///
/// A query succeeds at N exactly when its rank is below N, so one call
/// serves every N.
pub fn match_ranks(
    queries: ArrayView2<f64>,
    database: ArrayView2<f64>,
    query_locs: &[GeoLocation],
    db_locs: &[GeoLocation],
    pos_test: f64,
) -> Result<Vec<Option<usize>>, EvalError> {
    check_shapes(queries, database, query_locs, db_locs)?;
    let ranks = (0..queries.nrows())
        .into_par_iter()
        .map(|q| {
            let qrow = queries.row(q);
            let qd = qrow.as_slice().expect("standard layout");
            let dists: Vec<f64> = database
                .rows()
                .into_iter()
                .map(|r| squared_distance(qd, r.as_slice().expect("standard layout")))
                .collect();
            let best = (0..db_locs.len())
                .filter(|&j| query_locs[q].distance(&db_locs[j]) <= pos_test)
                .min_by(|&a, &b| retrieval_order(&dists, a, b))?;
            Some(
                (0..dists.len())
                    .filter(|&j| retrieval_order(&dists, j, best) == Ordering::Less)
                    .count(),
            )
        })
        .collect();
    Ok(ranks)
}

fn retrieval_order(dists: &[f64], a: usize, b: usize) -> Ordering {
    dists[a].total_cmp(&dists[b]).then(a.cmp(&b))
}

/// Recall@N from precomputed ranks.
pub fn recall_from_ranks(ranks: &[Option<usize>], n: usize) -> RecallOutcome {
    let evaluated = ranks.iter().flatten().count();
    let hits = ranks.iter().flatten().filter(|&&r| r < n).count();
    RecallOutcome {
        recall: if evaluated == 0 {
            0.0
        } else {
            100.0 * hits as f64 / evaluated as f64
        },
        evaluated,
        excluded: ranks.len() - evaluated,
    }
}

pub fn recall_at_n(
    queries: ArrayView2<f64>,
    database: ArrayView2<f64>,
    query_locs: &[GeoLocation],
    db_locs: &[GeoLocation],
    pos_test: f64,
    n: usize,
) -> Result<RecallOutcome, EvalError> {
    if n == 0 {
        return Err(EvalError::InvalidN);
    }
    let ranks = match_ranks(queries, database, query_locs, db_locs, pos_test)?;
    let outcome = recall_from_ranks(&ranks, n);
    if outcome.evaluated == 0 {
        return Err(EvalError::NoCoveredQueries(pos_test));
    }
    Ok(outcome)
}

fn locations(samples: &[Sample]) -> Vec<GeoLocation> {
    samples.iter().map(|s| s.location).collect()
}

/// Recall of `params` on a domain's test split for every N in `ns`.
pub fn evaluate_domain(
    params: &EncoderParams,
    dataset: &DomainDataset,
    ns: &[usize],
) -> Result<BTreeMap<usize, RecallOutcome>, EvalError> {
    if ns.contains(&0) {
        return Err(EvalError::InvalidN);
    }
    let queries: Vec<&Sample> = dataset.test_queries.iter().collect();
    let database: Vec<&Sample> = dataset.test_database.iter().collect();
    if database.is_empty() {
        return Err(EvalError::EmptyDatabase);
    }
    let q = params.encode(&queries)?;
    let db = params.encode(&database)?;
    let ranks = match_ranks(
        q.descriptors.view(),
        db.descriptors.view(),
        &locations(&dataset.test_queries),
        &locations(&dataset.test_database),
        dataset.thresholds.pos_test,
    )?;
    let first = recall_from_ranks(&ranks, 1);
    if first.evaluated == 0 {
        return Err(EvalError::NoCoveredQueries(dataset.thresholds.pos_test));
    }
    if first.excluded > 0 {
        log::warn!("{}: {} queries excluded (no database match)", dataset.name, first.excluded);
    }
    Ok(ns.iter().map(|&n| (n, recall_from_ranks(&ranks, n))).collect())
}

/// Per group, the mean Recall@N over its domains. Groups
/// model protocol steps that train several domains at once.
pub fn evaluate_groups(
    params: &EncoderParams,
    groups: &[Vec<&DomainDataset>],
    ns: &[usize],
) -> Result<Vec<BTreeMap<usize, f64>>, EvalError> {
    groups
        .iter()
        .map(|group| {
            let mut sums: BTreeMap<usize, f64> = ns.iter().map(|&n| (n, 0.0)).collect();
            for d in group {
                for (n, r) in evaluate_domain(params, d, ns)? {
                    *sums.get_mut(&n).expect("requested N") += r.recall;
                }
            }
            Ok(sums.into_iter().map(|(n, s)| (n, s / group.len() as f64)).collect())
        })
        .collect()
}

/// Lower-triangular matrix of Recall@1 percentages: row `i` holds the
/// recall on each of the first `i + 1` domain columns after step `i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecallMatrix {
    pub labels: Vec<String>,
    rows: Vec<Vec<f64>>,
}

impl RecallMatrix {
    pub fn new(labels: Vec<String>) -> Self {
        Self { labels, rows: Vec::new() }
    }

    pub fn from_rows(labels: Vec<String>, rows: Vec<Vec<f64>>) -> Result<Self, EvalError> {
        let mut m = Self::new(labels);
        for r in rows {
            m.push_row(r)?;
        }
        Ok(m)
    }

    pub fn push_row(&mut self, row: Vec<f64>) -> Result<(), EvalError> {
        let i = self.rows.len();
        let invalid = |reason: String| EvalError::InvalidRow { row: i, reason };
        if row.len() != i + 1 {
            return Err(invalid(format!("expected {} cells, got {}", i + 1, row.len())));
        }
        if i >= self.labels.len() {
            return Err(invalid(format!("only {} domain columns", self.labels.len())));
        }
        if let Some(v) = row.iter().find(|v| !(0.0..=100.0).contains(*v)) {
            return Err(invalid(format!("value {v} outside [0, 100]")));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn steps(&self) -> usize {
        self.rows.len()
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    /// Zero-based step and domain; `None` above the diagonal.
    pub fn get(&self, step: usize, domain: usize) -> Option<f64> {
        self.rows.get(step).and_then(|r| r.get(domain)).copied()
    }

    pub fn final_row(&self) -> Option<&[f64]> {
        self.rows.last().map(Vec::as_slice)
    }

    /// Header `step,<labels...>`, one line per step, empty undefined cells.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["step".to_string()];
        header.extend(self.labels.iter().cloned());
        w.write_record(&header).expect("in-memory write");
        for (i, row) in self.rows.iter().enumerate() {
            let mut rec = vec![(i + 1).to_string()];
            for j in 0..self.labels.len() {
                rec.push(row.get(j).map(|v| v.to_string()).unwrap_or_default());
            }
            w.write_record(&rec).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("utf8")
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), EvalError> {
        std::fs::write(path, self.to_csv()).map_err(|source| EvalError::Io {
            path: path.to_path_buf(),
            source,
        })
    }
}

/// Mean of the final row.
pub fn mean_recall_at_1(matrix: &RecallMatrix) -> Result<f64, EvalError> {
    let row = matrix.final_row().ok_or(EvalError::EmptyMatrix)?;
    Ok(row.iter().sum::<f64>() / row.len() as f64)
}

/// Mean over all but the last domain of peak recall minus final recall,
/// where the peak ranges over every step at which the domain was evaluated.
pub fn forgetting(matrix: &RecallMatrix) -> Result<f64, EvalError> {
    let t = matrix.steps();
    if t == 0 {
        return Err(EvalError::EmptyMatrix);
    }
    if t == 1 {
        return Err(EvalError::UndefinedForSingleStep);
    }
    let last = &matrix.rows[t - 1];
    let total: f64 = (0..t - 1)
        .map(|d| {
            let peak = (d..t).map(|l| matrix.rows[l][d]).fold(f64::NEG_INFINITY, f64::max);
            peak - last[d]
        })
        .sum();
    Ok(total / (t - 1) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ZeroShotOutcome {
    pub recall: RecallOutcome,
    pub protocol_violation: bool,
}

/// Recall@N of `params` on a domain never used for training. A holdout that
/// shares an id or name with a training domain is flagged and logged.
pub fn zero_shot(
    params: &EncoderParams,
    holdout: &DomainDataset,
    training: &[&DomainDataset],
    n: usize,
) -> Result<ZeroShotOutcome, EvalError> {
    let violation = training
        .iter()
        .any(|d| d.domain_id == holdout.domain_id || d.name == holdout.name);
    if violation {
        log::warn!(
            "protocol violation: holdout '{}' (domain {}) was seen in training",
            holdout.name,
            holdout.domain_id
        );
    }
    let recall = evaluate_domain(params, holdout, &[n])?[&n];
    Ok(ZeroShotOutcome {
        recall,
        protocol_violation: violation,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Absent when no trained domain was evaluated.
    pub mr_at_1: Option<f64>,
    pub forgetting: Option<f64>,
    pub recall_at_n_curve: BTreeMap<usize, f64>,
    pub zero_shot: Option<f64>,
}

impl EvalReport {
    /// Combines a recall matrix, the final per-column curves and an optional
    /// zero-shot recall. `curves` holds one map per matrix column.
    pub fn assemble(
        matrix: Option<&RecallMatrix>,
        curves: &[BTreeMap<usize, f64>],
        zero_shot: Option<f64>,
    ) -> Result<Self, EvalError> {
        let mr_at_1 = matrix.map(mean_recall_at_1).transpose()?;
        let forgetting = match matrix {
            Some(m) if m.steps() >= 2 => Some(forgetting(m)?),
            _ => None,
        };
        let mut curve = BTreeMap::new();
        if let Some(first) = curves.first() {
            for &n in first.keys() {
                let sum: f64 = curves.iter().map(|c| c[&n]).sum();
                curve.insert(n, sum / curves.len() as f64);
            }
        }
        Ok(Self {
            mr_at_1,
            forgetting,
            recall_at_n_curve: curve,
            zero_shot,
        })
    }

    pub fn write_json(&self, path: &Path) -> Result<(), EvalError> {
        let json = serde_json::to_string_pretty(self).expect("report serializes");
        std::fs::write(path, json).map_err(|source| EvalError::Io {
            path: path.to_path_buf(),
            source,
        })
    }
}
