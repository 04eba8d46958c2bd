//! The θ-decorrelation sampling pool.
//!
//! Pending replica requests are buffered and released by weighted random
//! sampling instead of FIFO order, which breaks the correlation between
//! consecutive client queries as observed by the server. The pool is padded
//! up to a minimum size θ with synthetic requests drawn from the real replica
//! distribution, so a near-empty pool still hides how many real queries are
//! waiting.

use std::collections::HashMap;

use rand::Rng;
use rand::RngCore;

use crate::error::{Error, Result};

/// Sentinel bucket index for dummy replica slots.
pub const DUMMY_BUCKET: u64 = u64::MAX;

/// Identifies one stored replica: a level (dynamization component), a bucket
/// within it, and a replica of that bucket.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ReplicaId {
    pub level: u16,
    pub bucket: u64,
    pub replica: u16,
}

impl ReplicaId {
    pub fn new(level: u16, bucket: u64, replica: u16) -> Self {
        Self {
            level,
            bucket,
            replica,
        }
    }

    pub fn is_dummy(&self) -> bool {
        self.bucket == DUMMY_BUCKET
    }
}

/// One buffered request. `synthetic` marks padding generated by the pool
/// itself rather than by a client.
#[derive(Debug, Clone, Copy)]
pub struct PoolItem {
    pub replica: ReplicaId,
    pub synthetic: bool,
}

/// How sampling weights evolve after each release.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum WeightPolicy {
    /// No-op: uniform sampling over pending items.
    Constant,
    /// `w += rate` per release; older items drift toward FIFO behavior.
    Linear { rate: f64 },
    /// `w *= rate` per release; strongly quasi-FIFO for rate > 1.
    Exponential { rate: f64 },
}

/// A probability mass over replica ids, sampled by inverse CDF.
#[derive(Debug, Clone)]
pub struct ReplicaDistribution {
    entries: Vec<(ReplicaId, f64)>,
    cumulative: Vec<f64>,
}

impl ReplicaDistribution {
    /// `entries` must sum to 1 within 1e-9.
    pub fn new(entries: Vec<(ReplicaId, f64)>) -> Result<Self> {
        let total: f64 = entries.iter().map(|(_, p)| p).sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "replica distribution sums to {total}, expected 1"
            )));
        }
        if entries.iter().any(|(_, p)| *p < 0.0) {
            return Err(Error::Config("negative probability".into()));
        }
        let mut cumulative = Vec::with_capacity(entries.len());
        let mut acc = 0.0;
        for (_, p) in &entries {
            acc += p;
            cumulative.push(acc);
        }
        Ok(Self {
            entries,
            cumulative,
        })
    }

    pub fn entries(&self) -> &[(ReplicaId, f64)] {
        &self.entries
    }

    pub fn support_size(&self) -> usize {
        self.entries.iter().filter(|(_, p)| *p > 0.0).count()
    }

    pub fn sample(&self, rng: &mut impl RngCore) -> ReplicaId {
        let u: f64 = rng.gen();
        let idx = self
            .cumulative
            .partition_point(|&c| c < u)
            .min(self.entries.len() - 1);
        self.entries[idx].0
    }
}

/// Sampling pool with minimum size θ.
pub struct Pool {
    items: Vec<PoolItem>,
    weights: Vec<f64>,
    membership: HashMap<ReplicaId, usize>,
    theta: usize,
    dist: ReplicaDistribution,
    policy: WeightPolicy,
    // Weight newly inserted items carry, in the pool's internal scale. Kept
    // at 1 relative to rescaling of grown weights so ratios are preserved.
    entry_weight: f64,
}

impl Pool {
    /// Builds a pool padded with θ synthetic draws from `dist`.
    pub fn setup(
        theta: usize,
        dist: ReplicaDistribution,
        policy: WeightPolicy,
        rng: &mut impl RngCore,
    ) -> Result<Self> {
        if theta > dist.support_size() {
            return Err(Error::Config(format!(
                "theta {} exceeds {} distinct replicas; deduplication makes padding impossible",
                theta,
                dist.support_size()
            )));
        }
        let mut pool = Self {
            items: Vec::new(),
            weights: Vec::new(),
            membership: HashMap::new(),
            theta,
            dist,
            policy,
            entry_weight: 1.0,
        };
        pool.refill(rng);
        Ok(pool)
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn theta(&self) -> usize {
        self.theta
    }

    pub fn items(&self) -> &[PoolItem] {
        &self.items
    }

    /// Replaces the synthetic-draw distribution (used after a rebuild changes
    /// the replica universe).
    pub fn set_distribution(&mut self, dist: ReplicaDistribution) -> Result<()> {
        if self.theta > dist.support_size() {
            return Err(Error::Config(
                "theta exceeds distinct replicas of new distribution".into(),
            ));
        }
        self.dist = dist;
        Ok(())
    }

    /// Buffers a real request for `replica`. Returns false if that replica is
    /// already pending; a pending synthetic item is promoted to real, since a
    /// client is now waiting on it.
    pub fn put(&mut self, replica: ReplicaId) -> bool {
        if let Some(&idx) = self.membership.get(&replica) {
            self.items[idx].synthetic = false;
            return false;
        }
        self.insert(replica, false);
        true
    }

    fn insert(&mut self, replica: ReplicaId, synthetic: bool) {
        self.membership.insert(replica, self.items.len());
        self.items.push(PoolItem { replica, synthetic });
        self.weights.push(self.entry_weight);
    }

    fn refill(&mut self, rng: &mut impl RngCore) {
        while self.items.len() < self.theta {
            let candidate = self.dist.sample(rng);
            if !self.membership.contains_key(&candidate) {
                self.insert(candidate, true);
            }
        }
    }

    /// Releases one pending item by weighted sampling, applies the weight
    /// policy to the remainder, and refills back up to θ.
    ///
    /// Must not be called on an empty pool; see [`Pool::get_or_simulated`].
    pub fn get(&mut self, rng: &mut impl RngCore) -> PoolItem {
        assert!(!self.items.is_empty(), "pool get on empty pool");
        let idx = self.sample_index(rng);
        let item = self.remove_at(idx);
        self.apply_policy();
        self.refill(rng);
        item
    }

    /// As [`Pool::get`], but when the pool is empty (only possible with θ=0)
    /// simulates a client by drawing directly from the replica distribution.
    pub fn get_or_simulated(&mut self, rng: &mut impl RngCore) -> PoolItem {
        if self.items.is_empty() {
            return PoolItem {
                replica: self.dist.sample(rng),
                synthetic: true,
            };
        }
        self.get(rng)
    }

    /// Drops items not satisfying `keep` (replicas of levels destroyed by a
    /// rebuild) and refills back up to θ from the current distribution.
    pub fn retain(&mut self, keep: impl Fn(&ReplicaId) -> bool, rng: &mut impl RngCore) {
        let mut i = 0;
        while i < self.items.len() {
            if keep(&self.items[i].replica) {
                i += 1;
            } else {
                self.remove_at(i);
            }
        }
        self.refill(rng);
    }

    fn sample_index(&self, rng: &mut impl RngCore) -> usize {
        let total: f64 = self.weights.iter().sum();
        if total <= 0.0 {
            return rng.gen_range(0..self.items.len());
        }
        let mut u: f64 = rng.gen::<f64>() * total;
        for (i, w) in self.weights.iter().enumerate() {
            u -= w;
            if u <= 0.0 {
                return i;
            }
        }
        self.items.len() - 1
    }

    fn remove_at(&mut self, idx: usize) -> PoolItem {
        let item = self.items.swap_remove(idx);
        self.weights.swap_remove(idx);
        self.membership.remove(&item.replica);
        if idx < self.items.len() {
            self.membership.insert(self.items[idx].replica, idx);
        }
        item
    }

    fn apply_policy(&mut self) {
        match self.policy {
            WeightPolicy::Constant => {}
            WeightPolicy::Linear { rate } => {
                for w in &mut self.weights {
                    *w += rate * self.entry_weight;
                }
            }
            WeightPolicy::Exponential { rate } => {
                for w in &mut self.weights {
                    *w *= rate;
                }
                // Rescale before weights overflow; ratios are what matter.
                let max = self.weights.iter().cloned().fold(0.0f64, f64::max);
                if max > 1e12 {
                    for w in &mut self.weights {
                        *w /= max;
                    }
                    self.entry_weight = (self.entry_weight / max).max(1e-300);
                }
            }
        }
    }
}
