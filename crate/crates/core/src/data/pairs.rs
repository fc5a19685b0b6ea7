use std::collections::{BTreeMap, HashMap};

use super::{GeoLocation, Sample, ThresholdSpec};

/// Above this many samples positives are found through a grid-bucket index
/// instead of the full distance matrix.
pub const GRID_INDEX_THRESHOLD: usize = 20_000;

/// Positive and negative relations between samples of a training pool,
/// indexed by position in the pool.
///
/// Samples from different domains live in unrelated coordinate frames: they
/// are never positives and always negatives of each other.
#[derive(Debug, Clone)]
pub struct PairIndex {
    positives: Vec<Vec<usize>>,
    locations: Vec<GeoLocation>,
    domains: Vec<u32>,
    thresholds: BTreeMap<u32, ThresholdSpec>,
}

impl PairIndex {
    pub fn len(&self) -> usize {
        self.positives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positives.is_empty()
    }

    pub fn positives(&self, a: usize) -> &[usize] {
        &self.positives[a]
    }

    pub fn is_positive(&self, a: usize, b: usize) -> bool {
        a != b
            && self.domains[a] == self.domains[b]
            && self.locations[a].distance(&self.locations[b]) < self.thresholds_of(a).pos_train
    }

    pub fn thresholds_of(&self, a: usize) -> &ThresholdSpec {
        &self.thresholds[&self.domains[a]]
    }

    pub fn is_negative(&self, a: usize, c: usize) -> bool {
        self.domains[a] != self.domains[c]
            || self.locations[a].distance(&self.locations[c]) > self.thresholds_of(a).neg_train
    }

    pub fn negatives(&self, a: usize) -> Vec<usize> {
        (0..self.len()).filter(|&c| self.is_negative(a, c)).collect()
    }

    /// Pool positions that have at least one positive.
    pub fn anchors(&self) -> Vec<usize> {
        (0..self.len()).filter(|&a| !self.positives[a].is_empty()).collect()
    }
}

/// Labels every pair of samples: positives strictly inside `pos_train`,
/// negatives strictly beyond `neg_train`, the band in between unlabeled.
pub fn mine_pairs(samples: &[Sample], spec: &ThresholdSpec) -> PairIndex {
    let thresholds = samples.iter().map(|s| (s.domain_id, *spec)).collect();
    mine_pool_pairs(samples, &thresholds)
}

/// Pair mining for a pool mixing several domains, each with its own radii.
///
/// # Panics
/// If a sample's domain has no entry in `thresholds`.
pub fn mine_pool_pairs(samples: &[Sample], thresholds: &BTreeMap<u32, ThresholdSpec>) -> PairIndex {
    let locations: Vec<GeoLocation> = samples.iter().map(|s| s.location).collect();
    let domains: Vec<u32> = samples.iter().map(|s| s.domain_id).collect();
    let radii: Vec<f64> = domains.iter().map(|d| thresholds[d].pos_train).collect();
    let positives = if samples.len() < GRID_INDEX_THRESHOLD {
        brute_force_positives(&locations, &domains, &radii)
    } else {
        grid_positives(&locations, &domains, &radii)
    };
    PairIndex {
        positives,
        locations,
        domains,
        thresholds: thresholds.clone(),
    }
}

fn brute_force_positives(locs: &[GeoLocation], domains: &[u32], radii: &[f64]) -> Vec<Vec<usize>> {
    (0..locs.len())
        .map(|a| {
            (0..locs.len())
                .filter(|&b| b != a && domains[a] == domains[b] && locs[a].distance(&locs[b]) < radii[a])
                .collect()
        })
        .collect()
}

// Buckets are one radius wide (per domain), so a 3x3 neighbourhood covers
// every candidate inside the radius.
fn grid_positives(locs: &[GeoLocation], domains: &[u32], radii: &[f64]) -> Vec<Vec<usize>> {
    let cell = |i: usize| {
        let r = radii[i];
        ((locs[i].x / r).floor() as i64, (locs[i].y / r).floor() as i64)
    };
    let mut buckets: HashMap<(u32, i64, i64), Vec<usize>> = HashMap::new();
    for i in 0..locs.len() {
        let (cx, cy) = cell(i);
        buckets.entry((domains[i], cx, cy)).or_default().push(i);
    }
    (0..locs.len())
        .map(|a| {
            let radius = radii[a];
            let (cx, cy) = cell(a);
            let mut out = Vec::new();
            for dx in -1..=1 {
                for dy in -1..=1 {
                    if let Some(b) = buckets.get(&(domains[a], cx + dx, cy + dy)) {
                        out.extend(
                            b.iter()
                                .copied()
                                .filter(|&b| b != a && locs[a].distance(&locs[b]) < radius),
                        );
                    }
                }
            }
            out.sort_unstable();
            out
        })
        .collect()
}
