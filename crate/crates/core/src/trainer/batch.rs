//! Epoch planning, batch assembly and in-batch hard-negative mining.
//!
//! A batch holds `B` anchors followed by their `B` positives, so anchor `i`
//! sits in row `i` and its positive in row `B + i`. Every other row is a
//! negative candidate for anchor `i` when it comes from another domain or
//! lies beyond the anchor domain's `neg_train` radius.

use std::collections::BTreeMap;

use ndarray::ArrayView2;
use rand::seq::SliceRandom;
use rand::Rng;

use super::TrainError;
use crate::data::{
    augment_with, mine_pool_pairs, AugmentDraw, AugmentSpec, DomainDataset, PairIndex, PointCloud, Sample,
    ThresholdSpec,
};
use crate::losses::Triplet;
use crate::memory::MemoryBank;
use crate::seed;

/// The current step's training data with its positive/negative relations.
#[derive(Debug, Clone)]
pub struct TrainPool {
    pub samples: Vec<Sample>,
    pub pairs: PairIndex,
    pub thresholds: BTreeMap<u32, ThresholdSpec>,
}

impl TrainPool {
    pub fn new(domains: &[&DomainDataset]) -> Result<Self, TrainError> {
        let mut thresholds = BTreeMap::new();
        let mut samples = Vec::new();
        for d in domains {
            if thresholds.insert(d.domain_id, d.thresholds).is_some() {
                return Err(TrainError::DuplicateDomain(d.domain_id));
            }
            samples.extend(d.train.iter().cloned());
        }
        let pairs = mine_pool_pairs(&samples, &thresholds);
        Ok(Self {
            samples,
            pairs,
            thresholds,
        })
    }
}

/// Where a batch anchor comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnchorRef {
    /// Position in the current pool.
    Current(usize),
    /// Position in the memory bank.
    Memory(usize),
}

/// Shuffles the union of usable current anchors and memory entries and cuts
/// it into batches of `batch_anchors`.
pub fn epoch_plan(
    pool: &TrainPool,
    memory: Option<&MemoryBank>,
    batch_anchors: usize,
    seed: u64,
) -> Result<Vec<Vec<AnchorRef>>, TrainError> {
    let mut refs: Vec<AnchorRef> = pool.pairs.anchors().into_iter().map(AnchorRef::Current).collect();
    if let Some(bank) = memory {
        refs.extend((0..bank.len()).map(AnchorRef::Memory));
    }
    if refs.is_empty() {
        return Err(TrainError::NoUsableAnchors);
    }
    refs.shuffle(&mut seed::rng(seed));
    Ok(refs.chunks(batch_anchors.max(1)).map(<[AnchorRef]>::to_vec).collect())
}

#[derive(Debug, Clone)]
pub struct Batch {
    /// Source samples in row order: anchors, then positives.
    pub samples: Vec<Sample>,
    /// Augmented clouds in row order.
    pub clouds: Vec<PointCloud>,
    pub memory_anchors: usize,
}

impl Batch {
    pub fn anchors(&self) -> usize {
        self.samples.len() / 2
    }

    pub fn rows(&self) -> usize {
        self.samples.len()
    }

    pub fn cloud_refs(&self) -> Vec<&PointCloud> {
        self.clouds.iter().collect()
    }
}

/// Memory anchors bring their stored partner; current anchors draw a
/// positive uniformly from the pool. Each row then gets its own
/// augmentation draw.
pub fn build_batch(
    pool: &TrainPool,
    memory: Option<&MemoryBank>,
    refs: &[AnchorRef],
    augment: Option<&AugmentSpec>,
    seed: u64,
) -> Result<Batch, TrainError> {
    let mut rng = seed::rng(seed);
    let mut anchors = Vec::with_capacity(refs.len());
    let mut positives = Vec::with_capacity(refs.len());
    let mut memory_anchors = 0;
    for r in refs {
        match *r {
            AnchorRef::Current(a) => {
                let candidates = pool.pairs.positives(a);
                if candidates.is_empty() {
                    return Err(TrainError::NoUsableAnchors);
                }
                let p = candidates[rng.random_range(0..candidates.len())];
                anchors.push(pool.samples[a].clone());
                positives.push(pool.samples[p].clone());
            }
            AnchorRef::Memory(m) => {
                let entry = &memory.ok_or(TrainError::NoUsableAnchors)?.entries()[m];
                anchors.push(entry.anchor.clone());
                positives.push(entry.positive.clone());
                memory_anchors += 1;
            }
        }
    }
    let mut samples = anchors;
    samples.extend(positives);
    let clouds = samples
        .iter()
        .map(|s| match augment {
            Some(spec) => augment_with(&s.cloud, &AugmentDraw::sample(spec, rng.random())),
            None => s.cloud.as_ref().clone(),
        })
        .collect();
    Ok(Batch {
        samples,
        clouds,
        memory_anchors,
    })
}

/// `mask[i][c]` is true when row `c` may serve as a negative for anchor `i`.
pub fn negative_mask(batch: &Batch, thresholds: &BTreeMap<u32, ThresholdSpec>) -> Vec<Vec<bool>> {
    (0..batch.anchors())
        .map(|i| {
            let a = &batch.samples[i];
            let neg_train = thresholds.get(&a.domain_id).map_or(f64::INFINITY, |t| t.neg_train);
            batch
                .samples
                .iter()
                .enumerate()
                .map(|(c, s)| {
                    c != i
                        && s.sample_id != a.sample_id
                        && (s.domain_id != a.domain_id || a.location.distance(&s.location) > neg_train)
                })
                .collect()
        })
        .collect()
}

/// Masked row with the smallest descriptor distance to the anchor, lowest
/// index on ties.
pub fn mine_hard_negative(anchor: &[f64], batch: ArrayView2<f64>, mask: &[bool]) -> Option<usize> {
    let mut best: Option<(f64, usize)> = None;
    for (c, row) in batch.rows().into_iter().enumerate() {
        if !mask.get(c).copied().unwrap_or(false) {
            continue;
        }
        let d: f64 = row.iter().zip(anchor).map(|(x, y)| (x - y) * (x - y)).sum();
        if best.is_none_or(|(bd, _)| d < bd) {
            best = Some((d, c));
        }
    }
    best.map(|(_, c)| c)
}

/// One triplet per anchor that has a valid negative; returns the triplets
/// and the number of anchors dropped.
pub fn mine_triplets(descriptors: ArrayView2<f64>, mask: &[Vec<bool>]) -> (Vec<Triplet>, usize) {
    let b = mask.len();
    let mut triplets = Vec::with_capacity(b);
    for (i, m) in mask.iter().enumerate() {
        let anchor = descriptors.row(i);
        let anchor = anchor.as_slice().expect("standard layout");
        if let Some(n) = mine_hard_negative(anchor, descriptors, m) {
            triplets.push(Triplet::new(i, b + i, n));
        }
    }
    let dropped = b - triplets.len();
    (triplets, dropped)
}
