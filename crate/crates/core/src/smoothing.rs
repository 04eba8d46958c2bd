//! Access-frequency smoothing: selective replication of hot buckets plus a
//! complementary fake-access distribution so every stored replica is
//! touched with identical probability.
//!
//! A store of B logical buckets expands to n′ = ⌈α·B⌉ slots. Bucket b with
//! estimated access probability π̂(b) gets R(b) = max(1, ⌈π̂(b)·n′/2⌉)
//! replicas; leftover slots become dummies. Each request flips a fair coin
//! between the real distribution (π̂ split evenly over replicas) and a fake
//! distribution chosen so that real + fake weight is exactly 2/n′ per slot,
//! making every slot equally likely overall.

use crate::error::{Error, Result};
use crate::pool::{ReplicaDistribution, ReplicaId, DUMMY_BUCKET};

/// Replica layout and fake-access distribution for one store level.
#[derive(Debug, Clone)]
pub struct SmoothingState {
    level: u16,
    /// Replica counts per logical bucket.
    replicas: Vec<u16>,
    /// Total slot count n′ = ⌈α·B⌉.
    slot_count: usize,
    /// Dummy slots appended after all real replicas.
    dummy_count: usize,
    /// Estimated per-bucket access probabilities.
    pi: Vec<f64>,
}

impl SmoothingState {
    /// Plans replication for `pi` (must sum to 1) under expansion factor
    /// `alpha ≥ 2`. Returns an error when the replicas demanded by hot
    /// buckets exceed the slot budget (impossible for α ≥ 2, but checked).
    pub fn plan(level: u16, pi: &[f64], alpha: f64) -> Result<Self> {
        if pi.is_empty() {
            return Err(Error::Config("cannot smooth an empty store".into()));
        }
        if alpha < 2.0 {
            return Err(Error::Config(format!(
                "expansion factor alpha={alpha} must be at least 2"
            )));
        }
        let total: f64 = pi.iter().sum();
        if (total - 1.0).abs() > 1e-9 || pi.iter().any(|&p| p < 0.0) {
            return Err(Error::Config(
                "access estimate must be a probability distribution".into(),
            ));
        }
        let slot_count = (alpha * pi.len() as f64).ceil() as usize;
        let replicas: Vec<u16> = pi
            .iter()
            .map(|&p| ((p * slot_count as f64 / 2.0).ceil() as u16).max(1))
            .collect();
        let used: usize = replicas.iter().map(|&r| r as usize).sum();
        if used > slot_count {
            return Err(Error::Allocation {
                requested: used,
                available: slot_count,
            });
        }
        Ok(Self {
            level,
            replicas,
            slot_count,
            dummy_count: slot_count - used,
            pi: pi.to_vec(),
        })
    }

    pub fn level(&self) -> u16 {
        self.level
    }

    pub fn bucket_count(&self) -> usize {
        self.replicas.len()
    }

    pub fn slot_count(&self) -> usize {
        self.slot_count
    }

    pub fn dummy_count(&self) -> usize {
        self.dummy_count
    }

    pub fn replica_counts(&self) -> &[u16] {
        &self.replicas
    }

    pub fn replica_count(&self, bucket: u64) -> u16 {
        self.replicas[bucket as usize]
    }

    /// Real-access distribution: π̂(b) split evenly over the bucket's
    /// replicas; dummies get zero.
    pub fn real_distribution(&self) -> Result<ReplicaDistribution> {
        let mut entries = Vec::with_capacity(self.slot_count);
        for (b, (&p, &r)) in self.pi.iter().zip(&self.replicas).enumerate() {
            for j in 0..r {
                entries.push((ReplicaId::new(self.level, b as u64, j), p / r as f64));
            }
        }
        for j in 0..self.dummy_count {
            entries.push((ReplicaId::new(self.level, DUMMY_BUCKET, j as u16), 0.0));
        }
        ReplicaDistribution::new(entries)
    }

    /// Fake-access distribution π_f(b, j) = 2/n′ − π̂(b)/R(b); dummies get
    /// 2/n′ each. Complementary to the real distribution so that
    /// (π̂(b)/R(b) + π_f(b, j)) / 2 = 1/n′ for every slot.
    pub fn fake_distribution(&self) -> Result<ReplicaDistribution> {
        let uniform = 2.0 / self.slot_count as f64;
        let mut entries = Vec::with_capacity(self.slot_count);
        for (b, (&p, &r)) in self.pi.iter().zip(&self.replicas).enumerate() {
            let w = uniform - p / r as f64;
            if w < -1e-9 {
                return Err(Error::Config(format!(
                    "replica weight {:.6} of bucket {b} exceeds 2/n'",
                    p / r as f64
                )));
            }
            for j in 0..r {
                entries.push((ReplicaId::new(self.level, b as u64, j), w.max(0.0)));
            }
        }
        for j in 0..self.dummy_count {
            entries.push((ReplicaId::new(self.level, DUMMY_BUCKET, j as u16), uniform));
        }
        ReplicaDistribution::new(entries)
    }

    /// Draws the replica to fetch for a real access to `bucket`.
    pub fn pick_replica(&self, bucket: u64, rng: &mut impl rand::Rng) -> ReplicaId {
        let r = self.replicas[bucket as usize];
        ReplicaId::new(self.level, bucket, rng.gen_range(0..r))
    }

    /// Flips the fair real-vs-fake coin.
    pub fn flip_fake(&self, rng: &mut impl rand::Rng) -> bool {
        rng.gen_bool(0.5)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng;

    const PI3: [f64; 3] = [0.5543, 0.3800, 0.0657];

    #[test]
    fn three_bucket_layout() {
        let s = SmoothingState::plan(0, &PI3, 2.0).unwrap();
        assert_eq!(s.slot_count(), 6);
        assert_eq!(s.replica_counts(), &[2, 2, 1]);
        assert_eq!(s.dummy_count(), 1);
    }

    #[test]
    fn three_bucket_fake_distribution() {
        let s = SmoothingState::plan(0, &PI3, 2.0).unwrap();
        let fake = s.fake_distribution().unwrap();
        let expect = [
            0.0562, 0.0562, // bucket 0, two replicas
            0.1433, 0.1433, // bucket 1, two replicas
            0.2676, // bucket 2, one replica
            0.3333, // dummy slot
        ];
        for (i, ((id, w), want)) in fake.entries().iter().zip(expect).enumerate() {
            assert!((w - want).abs() < 5e-4, "slot {i} ({id:?}): {w} vs {want}");
        }
    }

    #[test]
    fn slot_touch_probability_is_uniform() {
        let mut r = rng::fork(41, "smoothing-test");
        for trial in 0..20 {
            let b = r.gen_range(2..40usize);
            let mut pi: Vec<f64> = (0..b).map(|_| r.gen::<f64>() + 1e-3).collect();
            let total: f64 = pi.iter().sum();
            pi.iter_mut().for_each(|p| *p /= total);
            let alpha = 2.0 + r.gen::<f64>() * 2.0;
            let s = SmoothingState::plan(0, &pi, alpha).unwrap();
            let real = s.real_distribution().unwrap();
            let fake = s.fake_distribution().unwrap();
            assert_eq!(real.entries().len(), s.slot_count());
            let uniform = 1.0 / s.slot_count() as f64;
            for ((id_r, wr), (id_f, wf)) in real.entries().iter().zip(fake.entries()) {
                assert_eq!(id_r, id_f);
                let touch = (wr + wf) / 2.0;
                assert!(
                    (touch - uniform).abs() < 1e-9,
                    "trial {trial}: slot {id_r:?} touch={touch} uniform={uniform}"
                );
            }
        }
    }

    #[test]
    fn fake_distribution_sums_to_one() {
        let s = SmoothingState::plan(0, &PI3, 2.0).unwrap();
        let total: f64 = s.fake_distribution().unwrap().entries().iter().map(|(_, w)| w).sum();
        assert!((total - 1.0).abs() < 1e-9);
    }

    #[test]
    fn alpha_below_two_rejected() {
        assert!(SmoothingState::plan(0, &PI3, 1.5).is_err());
    }

    #[test]
    fn non_distribution_rejected() {
        assert!(SmoothingState::plan(0, &[0.5, 0.4], 2.0).is_err());
    }

    #[test]
    fn empirical_slot_frequencies_are_flat() {
        let mut r = rng::fork(42, "smoothing-test");
        let s = SmoothingState::plan(0, &PI3, 2.0).unwrap();
        let real = s.real_distribution().unwrap();
        let fake = s.fake_distribution().unwrap();
        let mut counts = vec![0usize; s.slot_count()];
        let trials = 120_000usize;
        for _ in 0..trials {
            let dist = if s.flip_fake(&mut r) { &fake } else { &real };
            let id = dist.sample(&mut r);
            let idx = real
                .entries()
                .iter()
                .position(|(e, _)| *e == id)
                .unwrap();
            counts[idx] += 1;
        }
        let expect = trials as f64 / s.slot_count() as f64;
        let sd = (expect * (1.0 - 1.0 / s.slot_count() as f64)).sqrt();
        for (i, &c) in counts.iter().enumerate() {
            assert!(
                (c as f64 - expect).abs() < 4.5 * sd,
                "slot {i}: {c} vs {expect}"
            );
        }
    }
}
