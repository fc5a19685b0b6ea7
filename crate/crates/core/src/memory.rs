//! Exemplar memory of positive pairs from past domains.
//!
//! The bank holds at most `K` clouds, i.e. `R = K / 2` (anchor, positive)
//! pairs. After each finished domain the `R` slots are re-split across all
//! seen domains: earlier domains get `ceil(R / t)` slots first, the rest
//! `floor(R / t)`. Old domains shrink by uniform random eviction and the new
//! domain is filled by uniform random sampling of anchors (among samples
//! that have a positive) and of a positive for each anchor.

use std::collections::{BTreeMap, HashSet};

use rand::seq::{index::sample as sample_indices, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{mine_pairs, DomainDataset, Sample, ThresholdSpec};
use crate::seed;

#[derive(Debug, Error, PartialEq)]
pub enum MemoryError {
    #[error("domain {0} has no sample with a positive")]
    NoPositivePairs(String),
    #[error("requested {requested} entries, bank holds {available}")]
    InsufficientEntries { requested: usize, available: usize },
    #[error("capacity {0} must be even")]
    OddCapacity(usize),
    #[error("domain {0} is already in memory")]
    DuplicateDomain(u32),
    #[error("manifest references unknown sample {sample_id} of domain {domain}")]
    UnknownSample { domain: u32, sample_id: u64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryEntry {
    pub anchor: Sample,
    pub positive: Sample,
    pub domain_id: u32,
}

/// A domain the bank has seen, in order of arrival.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeenDomain {
    pub domain_id: u32,
    pub name: String,
    pub thresholds: ThresholdSpec,
    pub source: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBank {
    capacity: usize,
    rng_seed: u64,
    updates: u64,
    domains: Vec<SeenDomain>,
    entries: Vec<MemoryEntry>,
}

impl MemoryBank {
    /// `capacity` counts clouds; 0 disables the memory.
    pub fn new(capacity: usize, rng_seed: u64) -> Result<Self, MemoryError> {
        if capacity % 2 != 0 {
            return Err(MemoryError::OddCapacity(capacity));
        }
        Ok(Self {
            capacity,
            rng_seed,
            updates: 0,
            domains: Vec::new(),
            entries: Vec::new(),
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn pair_capacity(&self) -> usize {
        self.capacity / 2
    }

    pub fn entries(&self) -> &[MemoryEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn domains(&self) -> &[SeenDomain] {
        &self.domains
    }

    pub fn thresholds(&self, domain_id: u32) -> Option<&ThresholdSpec> {
        self.domains
            .iter()
            .find(|d| d.domain_id == domain_id)
            .map(|d| &d.thresholds)
    }

    /// Entry count per seen domain, in arrival order.
    pub fn counts(&self) -> Vec<(u32, usize)> {
        self.domains
            .iter()
            .map(|d| {
                let n = self.entries.iter().filter(|e| e.domain_id == d.domain_id).count();
                (d.domain_id, n)
            })
            .collect()
    }

    fn quota(&self, position: usize) -> usize {
        let t = self.domains.len();
        let r = self.pair_capacity();
        r / t + usize::from(position < r % t)
    }

    /// Registers the training split of a finished domain and rebalances.
    pub fn update(&mut self, finished: &DomainDataset) -> Result<(), MemoryError> {
        self.update_with_source(finished, None)
    }

    pub fn update_with_source(
        &mut self,
        finished: &DomainDataset,
        source: Option<String>,
    ) -> Result<(), MemoryError> {
        let pairs = mine_pairs(&finished.train, &finished.thresholds);
        let mut new_ids: Vec<u32> = Vec::new();
        for s in &finished.train {
            if !new_ids.contains(&s.domain_id) {
                new_ids.push(s.domain_id);
            }
        }
        if new_ids.is_empty() || pairs.anchors().is_empty() {
            return Err(MemoryError::NoPositivePairs(finished.name.clone()));
        }
        for id in &new_ids {
            if self.domains.iter().any(|d| d.domain_id == *id) {
                return Err(MemoryError::DuplicateDomain(*id));
            }
        }
        let mut rng = seed::derived_rng(self.rng_seed, "memory-update", &[self.updates]);
        self.updates += 1;
        let first_new = self.domains.len();
        for id in &new_ids {
            self.domains.push(SeenDomain {
                domain_id: *id,
                name: finished.name.clone(),
                thresholds: finished.thresholds,
                source: source.clone(),
            });
        }

        // Shrink old domains to their new quota.
        for pos in 0..first_new {
            let id = self.domains[pos].domain_id;
            let quota = self.quota(pos);
            let held: Vec<usize> = (0..self.entries.len())
                .filter(|&i| self.entries[i].domain_id == id)
                .collect();
            if held.len() > quota {
                let mut evict: Vec<usize> = sample_indices(&mut rng, held.len(), held.len() - quota)
                    .into_iter()
                    .map(|k| held[k])
                    .collect();
                evict.sort_unstable();
                for i in evict.into_iter().rev() {
                    self.entries.remove(i);
                }
            }
        }

        let mut used: HashSet<u64> = self
            .entries
            .iter()
            .flat_map(|e| [e.anchor.sample_id, e.positive.sample_id])
            .collect();
        for (k, id) in new_ids.iter().enumerate() {
            let quota = self.quota(first_new + k);
            let mut anchors: Vec<usize> = pairs
                .anchors()
                .into_iter()
                .filter(|&a| finished.train[a].domain_id == *id)
                .collect();
            if anchors.is_empty() {
                return Err(MemoryError::NoPositivePairs(format!("{} (domain {id})", finished.name)));
            }
            anchors.shuffle(&mut rng);
            let mut taken = 0;
            for a in anchors {
                if taken == quota {
                    break;
                }
                if used.contains(&finished.train[a].sample_id) {
                    continue;
                }
                let fresh: Vec<usize> = pairs
                    .positives(a)
                    .iter()
                    .copied()
                    .filter(|&p| !used.contains(&finished.train[p].sample_id))
                    .collect();
                let pool = if fresh.is_empty() { pairs.positives(a) } else { &fresh };
                let p = pool[rng.random_range(0..pool.len())];
                let anchor = finished.train[a].clone();
                let positive = finished.train[p].clone();
                used.insert(anchor.sample_id);
                used.insert(positive.sample_id);
                self.entries.push(MemoryEntry {
                    anchor,
                    positive,
                    domain_id: *id,
                });
                taken += 1;
            }
            if taken < quota {
                log::warn!(
                    "memory: domain {id} filled {taken} of {quota} slots (too few distinct anchors)"
                );
            }
        }
        Ok(())
    }

    /// Uniform sample without replacement.
    pub fn draw(&self, count: usize, seed: u64) -> Result<Vec<&MemoryEntry>, MemoryError> {
        if count > self.entries.len() {
            return Err(MemoryError::InsufficientEntries {
                requested: count,
                available: self.entries.len(),
            });
        }
        let mut rng = seed::rng(seed);
        Ok(sample_indices(&mut rng, self.entries.len(), count)
            .into_iter()
            .map(|i| &self.entries[i])
            .collect())
    }

    pub fn manifest(&self) -> MemoryManifest {
        let source_of = |id: u32| {
            self.domains
                .iter()
                .find(|d| d.domain_id == id)
                .and_then(|d| d.source.clone())
        };
        MemoryManifest {
            capacity: self.capacity,
            rng_seed: self.rng_seed,
            updates: self.updates,
            domains: self.domains.clone(),
            entries: self
                .entries
                .iter()
                .map(|e| ManifestEntry {
                    domain: e.domain_id,
                    anchor: e.anchor.sample_id,
                    positive: e.positive.sample_id,
                    source: source_of(e.domain_id),
                })
                .collect(),
        }
    }

    /// Rebuilds a bank, resolving sample ids through `lookup`.
    pub fn from_manifest(
        manifest: &MemoryManifest,
        lookup: impl Fn(u32, u64) -> Option<Sample>,
    ) -> Result<Self, MemoryError> {
        let mut bank = MemoryBank::new(manifest.capacity, manifest.rng_seed)?;
        bank.updates = manifest.updates;
        bank.domains = manifest.domains.clone();
        for e in &manifest.entries {
            let find = |sample_id| {
                lookup(e.domain, sample_id).ok_or(MemoryError::UnknownSample {
                    domain: e.domain,
                    sample_id,
                })
            };
            bank.entries.push(MemoryEntry {
                anchor: find(e.anchor)?,
                positive: find(e.positive)?,
                domain_id: e.domain,
            });
        }
        Ok(bank)
    }
}

/// Checkpoint form of a bank.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryManifest {
    pub capacity: usize,
    pub rng_seed: u64,
    pub updates: u64,
    pub domains: Vec<SeenDomain>,
    pub entries: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub domain: u32,
    pub anchor: u64,
    pub positive: u64,
    pub source: Option<String>,
}

/// Per-domain counts keyed by domain id.
pub fn count_map(bank: &MemoryBank) -> BTreeMap<u32, usize> {
    bank.counts().into_iter().collect()
}
