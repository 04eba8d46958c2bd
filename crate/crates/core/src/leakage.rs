//! Adversary-view instrumentation and analysis: workload generators, the
//! server-side access trace, transition-frequency matrices, relative
//! standard deviation, uniformity tests, latency distributions, and a
//! real-or-random statistical distinguisher.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::crypto::BucketLabel;
use crate::error::{Error, Result};

/// Server-visible operation kind.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TraceOp {
    Read,
    Write,
}

/// One server-visible access: batch slot, requested label, operation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TraceEvent {
    pub slot: u64,
    pub label: BucketLabel,
    pub op: TraceOp,
}

/// Append-only record of everything the server observes.
#[derive(Debug, Default, Clone)]
pub struct AccessTrace {
    pub events: Vec<TraceEvent>,
}

impl AccessTrace {
    pub fn read_labels(&self) -> Vec<BucketLabel> {
        self.events
            .iter()
            .filter(|e| e.op == TraceOp::Read)
            .map(|e| e.label)
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("slot,label_hex,op\n");
        for e in &self.events {
            let op = match e.op {
                TraceOp::Read => "read",
                TraceOp::Write => "write",
            };
            out.push_str(&format!("{},{},{}\n", e.slot, e.label.to_hex(), op));
        }
        out
    }
}

/// Shared, internally synchronized trace recorder handed to backends.
#[derive(Debug, Default, Clone)]
pub struct TraceSink {
    inner: Arc<Mutex<AccessTrace>>,
}

impl TraceSink {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record_batch(&self, slot: u64, labels: &[BucketLabel], op: TraceOp) {
        let mut trace = self.inner.lock().unwrap();
        debug_assert!(trace.events.last().is_none_or(|e| e.slot <= slot));
        for &label in labels {
            trace.events.push(TraceEvent { slot, label, op });
        }
    }

    pub fn snapshot(&self) -> AccessTrace {
        self.inner.lock().unwrap().clone()
    }

    pub fn len(&self) -> usize {
        self.inner.lock().unwrap().events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A finite-state Markov workload model over search keys.
#[derive(Debug, Clone)]
pub struct MarkovModel {
    pub states: Vec<u64>,
    p: Vec<Vec<f64>>,
}

impl MarkovModel {
    /// Rows of `p` must each sum to 1 within 1e-9.
    pub fn new(states: Vec<u64>, p: Vec<Vec<f64>>) -> Result<Self> {
        if states.len() != p.len() || p.iter().any(|row| row.len() != states.len()) {
            return Err(Error::Config("transition matrix shape mismatch".into()));
        }
        for (i, row) in p.iter().enumerate() {
            let total: f64 = row.iter().sum();
            if (total - 1.0).abs() > 1e-9 || row.iter().any(|&v| v < 0.0) {
                return Err(Error::Config(format!(
                    "row {i} of transition matrix sums to {total}"
                )));
            }
        }
        Ok(Self { states, p })
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// Samples the successor state index of `current`.
    pub fn next(&self, current: usize, rng: &mut impl rand::Rng) -> usize {
        let u: f64 = rng.gen();
        let row = &self.p[current];
        let mut acc = 0.0;
        for (j, &pj) in row.iter().enumerate() {
            acc += pj;
            if u < acc {
                return j;
            }
        }
        row.len() - 1
    }

    /// Stationary distribution by power iteration.
    pub fn stationary(&self) -> Vec<f64> {
        let n = self.len();
        let mut pi = vec![1.0 / n as f64; n];
        for _ in 0..10_000 {
            let mut next = vec![0.0; n];
            for i in 0..n {
                for j in 0..n {
                    next[j] += pi[i] * self.p[i][j];
                }
            }
            let diff: f64 = pi.iter().zip(&next).map(|(a, b)| (a - b).abs()).sum();
            pi = next;
            if diff < 1e-14 {
                break;
            }
        }
        pi
    }
}

/// Zipf law over ranks 1..=n with exponent `s`, as an explicit distribution.
pub fn zipf_weights(n: usize, s: f64) -> Vec<f64> {
    let mut w: Vec<f64> = (1..=n).map(|r| (r as f64).powf(-s)).collect();
    let total: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= total);
    w
}

/// Samples an index from an explicit probability vector.
pub fn sample_index(weights: &[f64], rng: &mut impl rand::Rng) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, &w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return i;
        }
    }
    weights.len() - 1
}

/// Frequency matrix of consecutive class pairs: entry (a, b) is the
/// fraction of adjacent observations that were class a followed by class b.
pub fn transition_matrix(classes: &[usize], class_count: usize) -> Vec<f64> {
    let mut m = vec![0.0f64; class_count * class_count];
    if classes.len() < 2 {
        return m;
    }
    for w in classes.windows(2) {
        m[w[0] * class_count + w[1]] += 1.0;
    }
    let total = (classes.len() - 1) as f64;
    m.iter_mut().for_each(|v| *v /= total);
    m
}

/// Maps read labels of a trace onto class indices via `index_of`, dropping
/// unknown labels (e.g. write-back traffic of destroyed epochs).
pub fn classify_reads(
    trace: &AccessTrace,
    index_of: &HashMap<BucketLabel, usize>,
) -> Vec<usize> {
    trace
        .events
        .iter()
        .filter(|e| e.op == TraceOp::Read)
        .filter_map(|e| index_of.get(&e.label).copied())
        .collect()
}

/// Relative standard deviation: population standard deviation of entries
/// divided by their mean. Zero iff all entries are equal; invariant under
/// uniform scaling.
pub fn rsd(entries: &[f64]) -> f64 {
    assert!(!entries.is_empty());
    let n = entries.len() as f64;
    let mean = entries.iter().sum::<f64>() / n;
    if mean == 0.0 {
        return 0.0;
    }
    let var = entries.iter().map(|&v| (v - mean).powi(2)).sum::<f64>() / n;
    var.sqrt() / mean
}

/// Chi-square upper-tail p-value.
fn chi2_p(statistic: f64, dof: f64) -> f64 {
    if dof < 1.0 {
        return 1.0;
    }
    ChiSquared::new(dof).map(|d| d.sf(statistic)).unwrap_or(1.0)
}

/// Chi-square goodness-of-fit p-value of observed counts against arbitrary
/// expected class probabilities. Classes with negligible expectation are
/// pooled out of the statistic.
pub fn chi2_gof(counts: &[u64], probs: &[f64]) -> f64 {
    assert_eq!(counts.len(), probs.len());
    let n: u64 = counts.iter().sum();
    if n == 0 {
        return 1.0;
    }
    let mut stat = 0.0;
    let mut cells = 0usize;
    for (&c, &p) in counts.iter().zip(probs) {
        let expected = p * n as f64;
        if expected < 1e-9 {
            continue;
        }
        cells += 1;
        stat += (c as f64 - expected).powi(2) / expected;
    }
    if cells < 2 {
        return 1.0;
    }
    chi2_p(stat, (cells - 1) as f64)
}

/// Tests observed per-class counts against the uniform distribution over
/// `class_count` classes. Returns (max relative deviation from the uniform
/// frequency, chi-square goodness-of-fit p-value).
pub fn uniformity_test(counts: &[u64], class_count: usize) -> (f64, f64) {
    assert_eq!(counts.len(), class_count);
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return (0.0, 1.0);
    }
    let expect = total as f64 / class_count as f64;
    let mut max_dev = 0.0f64;
    let mut stat = 0.0f64;
    for &c in counts {
        let dev = (c as f64 - expect).abs() / expect;
        max_dev = max_dev.max(dev);
        stat += (c as f64 - expect).powi(2) / expect;
    }
    (max_dev, chi2_p(stat, class_count as f64 - 1.0))
}

/// Two-sample chi-square test of homogeneity over per-class counts.
/// Classes empty in both samples are dropped from the statistic.
pub fn two_sample_chi2(a: &[u64], b: &[u64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let na: u64 = a.iter().sum();
    let nb: u64 = b.iter().sum();
    if na == 0 || nb == 0 {
        return 1.0;
    }
    let (na, nb) = (na as f64, nb as f64);
    let mut stat = 0.0;
    let mut cells = 0usize;
    for (&x, &y) in a.iter().zip(b) {
        let pooled = x as f64 + y as f64;
        if pooled == 0.0 {
            continue;
        }
        cells += 1;
        let ea = pooled * na / (na + nb);
        let eb = pooled * nb / (na + nb);
        stat += (x as f64 - ea).powi(2) / ea + (y as f64 - eb).powi(2) / eb;
    }
    chi2_p(stat, cells.saturating_sub(1) as f64)
}

/// Outcome of the real-or-random distinguishing game: p-values for
/// per-label frequency equality and consecutive-label-pair frequency
/// equality between a real trace and an ideal (uniform) trace.
#[derive(Debug, Clone, Copy)]
pub struct DistinguishResult {
    pub label_p: f64,
    pub pair_p: f64,
}

impl DistinguishResult {
    /// The operational indistinguishability threshold.
    pub fn indistinguishable(&self) -> bool {
        self.label_p > 0.01 && self.pair_p > 0.01
    }
}

/// Compares two classified read sequences over the same `class_count`
/// universe: marginal label frequencies and adjacent-pair frequencies.
/// Pair cells are aggregated per (first, second) class.
pub fn ror_crda_distinguish(
    real: &[usize],
    ideal: &[usize],
    class_count: usize,
) -> DistinguishResult {
    let count = |seq: &[usize]| -> Vec<u64> {
        let mut c = vec![0u64; class_count];
        for &s in seq {
            c[s] += 1;
        }
        c
    };
    let pair_count = |seq: &[usize]| -> Vec<u64> {
        let mut c = vec![0u64; class_count * class_count];
        for w in seq.windows(2) {
            c[w[0] * class_count + w[1]] += 1;
        }
        c
    };
    DistinguishResult {
        label_p: two_sample_chi2(&count(real), &count(ideal)),
        pair_p: two_sample_chi2(&pair_count(real), &pair_count(ideal)),
    }
}

/// Summary of per-query completion latencies, measured in batches.
#[derive(Debug, Clone, Copy)]
pub struct LatencySummary {
    pub mean: f64,
    pub p50: u64,
    pub p95: u64,
    pub p99: u64,
    pub max: u64,
}

pub fn latency_in_batches(latencies: &[u64]) -> LatencySummary {
    assert!(!latencies.is_empty());
    let mut sorted = latencies.to_vec();
    sorted.sort_unstable();
    let pct = |q: f64| sorted[((sorted.len() - 1) as f64 * q).round() as usize];
    LatencySummary {
        mean: sorted.iter().sum::<u64>() as f64 / sorted.len() as f64,
        p50: pct(0.50),
        p95: pct(0.95),
        p99: pct(0.99),
        max: *sorted.last().unwrap(),
    }
}

/// Matrix CSV export (square grid, row per line).
pub fn matrix_to_csv(m: &[f64], dim: usize) -> String {
    let mut out = String::new();
    for row in m.chunks(dim) {
        let line: Vec<String> = row.iter().map(|v| format!("{v:.6}")).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    out
}
