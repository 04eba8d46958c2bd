//! Range-query layer: bucketization of sorted data, per-bucket access
//! probabilities, query partitioning into bucket requests, and reply
//! assembly with false-positive filtering.
//!
//! Bucket tags (key intervals) live only at the trusted proxy; the server
//! sees labels and ciphertexts.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::pool::{Pool, ReplicaId};

/// Search-key sentinel for dummy records; sorts after every real key.
pub const DUMMY_KEY: u64 = u64::MAX;

/// One stored record: search key, fixed-length value, sequence timestamp,
/// and a tombstone flag for deletions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Record {
    pub key: u64,
    pub value: Vec<u8>,
    pub seq: u64,
    pub tombstone: bool,
}

impl Record {
    pub fn new(key: u64, value: Vec<u8>, seq: u64) -> Self {
        Self {
            key,
            value,
            seq,
            tombstone: false,
        }
    }

    pub fn tombstone(key: u64, value_len: usize, seq: u64) -> Self {
        Self {
            key,
            value: vec![0; value_len],
            seq,
            tombstone: true,
        }
    }

    pub fn dummy(value_len: usize) -> Self {
        Self {
            key: DUMMY_KEY,
            value: vec![0; value_len],
            seq: 0,
            tombstone: false,
        }
    }

    pub fn is_dummy(&self) -> bool {
        self.key == DUMMY_KEY
    }

    /// Serialized size with a value of `value_len` bytes.
    pub const fn wire_len(value_len: usize) -> usize {
        8 + 8 + 1 + value_len
    }

    pub fn write_to(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.key.to_le_bytes());
        out.extend_from_slice(&self.seq.to_le_bytes());
        out.push(self.tombstone as u8);
        out.extend_from_slice(&self.value);
    }

    pub fn read_from(buf: &[u8], value_len: usize) -> Result<Self> {
        if buf.len() < Self::wire_len(value_len) {
            return Err(Error::Persistence("short record".into()));
        }
        Ok(Self {
            key: u64::from_le_bytes(buf[0..8].try_into().unwrap()),
            seq: u64::from_le_bytes(buf[8..16].try_into().unwrap()),
            tombstone: buf[16] != 0,
            value: buf[17..17 + value_len].to_vec(),
        })
    }
}

/// Inclusive key interval covered by a bucket.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Tag {
    pub l: u64,
    pub r: u64,
}

/// A fixed-capacity group of Z records, real records first, then dummies.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Bucket {
    pub tag: Tag,
    pub slots: Vec<Record>,
}

impl Bucket {
    pub fn serialize(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for rec in &self.slots {
            rec.write_to(&mut out);
        }
        out
    }

    pub fn deserialize(buf: &[u8], z: usize, value_len: usize) -> Result<Self> {
        let rec_len = Record::wire_len(value_len);
        if buf.len() != z * rec_len {
            return Err(Error::Persistence(format!(
                "bucket payload is {} bytes, expected {}",
                buf.len(),
                z * rec_len
            )));
        }
        let mut slots = Vec::with_capacity(z);
        for i in 0..z {
            slots.push(Record::read_from(&buf[i * rec_len..], value_len)?);
        }
        let tag = tag_of(&slots);
        Ok(Self { tag, slots })
    }
}

fn tag_of(slots: &[Record]) -> Tag {
    let reals: Vec<&Record> = slots.iter().filter(|r| !r.is_dummy()).collect();
    match (reals.first(), reals.last()) {
        (Some(f), Some(l)) => Tag {
            l: f.key,
            r: l.key,
        },
        _ => Tag {
            l: DUMMY_KEY,
            r: DUMMY_KEY,
        },
    }
}

/// Splits sorted records into `ceil(n/Z)` buckets of exactly Z slots,
/// dummy-padding the tail. Tags are extracted per bucket in logical order;
/// shuffling is the caller's next step.
pub fn bucketize(records: Vec<Record>, z: usize, value_len: usize) -> Result<Vec<Bucket>> {
    if z == 0 {
        return Err(Error::Config("bucket capacity Z must be positive".into()));
    }
    debug_assert!(records.windows(2).all(|w| w[0].key <= w[1].key));
    let mut buckets = Vec::with_capacity(records.len().div_ceil(z));
    let mut iter = records.into_iter().peekable();
    while iter.peek().is_some() {
        let mut slots: Vec<Record> = iter.by_ref().take(z).collect();
        while slots.len() < z {
            slots.push(Record::dummy(value_len));
        }
        let tag = tag_of(&slots);
        buckets.push(Bucket { tag, slots });
    }
    Ok(buckets)
}

/// Cumulative range-query distribution: `table[x][y] = Σ_{i≤x, j≤y} p[i,j]`,
/// where `p[i,j]` is the probability of querying the range `[i, j]`.
#[derive(Debug, Clone)]
pub struct CumulativeRangeDist {
    pub n: u64,
    /// `None` means the uniform distribution, evaluated in closed form
    /// (the explicit table would be quadratic in N).
    table: Option<Vec<f64>>,
}

impl CumulativeRangeDist {
    /// Builds the table from a range-mass function over `1 ≤ i ≤ j ≤ N`.
    /// The mass must sum to 1 within 1e-9.
    pub fn from_mass(n: u64, mass: impl Fn(u64, u64) -> f64) -> Result<Self> {
        let dim = n as usize + 1;
        let mut table = vec![0.0f64; dim * dim];
        for x in 1..=n as usize {
            for y in 1..=n as usize {
                let p = if x <= y { mass(x as u64, y as u64) } else { 0.0 };
                table[x * dim + y] =
                    p + table[(x - 1) * dim + y] + table[x * dim + y - 1]
                        - table[(x - 1) * dim + y - 1];
            }
        }
        let total = table[dim * dim - 1];
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "range distribution sums to {total}, expected 1"
            )));
        }
        Ok(Self {
            n,
            table: Some(table),
        })
    }

    pub fn uniform(n: u64) -> Self {
        Self { n, table: None }
    }

    fn at(&self, x: u64, y: u64) -> f64 {
        match &self.table {
            Some(table) => {
                let dim = self.n as usize + 1;
                table[x as usize * dim + y as usize]
            }
            // Uniform: Σ_{i≤x, j≤y, i≤j} p = p · (pairs with i ≤ min(x,j)).
            None => {
                let p = 2.0 / (self.n as f64 * (self.n as f64 + 1.0));
                let (x, y) = (x as f64, y as f64);
                let m = x.min(y);
                p * (m * (m + 1.0) / 2.0 + (y - m).max(0.0) * x)
            }
        }
    }

    /// Probability that a sampled range overlaps the bucket interval `[l, r]`:
    /// `p≤[r,N] + p≤[N,r] − p≤[r,r] − p≤[l−1,l−1]`.
    pub fn bucket_inclusion(&self, tag: Tag) -> f64 {
        if tag.l == DUMMY_KEY {
            return 0.0;
        }
        let (l, r) = (tag.l, tag.r.min(self.n));
        (self.at(r, self.n) + self.at(self.n, r) - self.at(r, r) - self.at(l - 1, l - 1))
            .clamp(0.0, 1.0)
    }
}

/// Per-bucket probability of being contained in a query's result set.
pub fn derive_bucket_distribution(dist: &CumulativeRangeDist, tags: &[Tag]) -> Vec<f64> {
    tags.iter().map(|t| dist.bucket_inclusion(*t)).collect()
}

/// Closed form of the bucket inclusion probability under uniformly random
/// range queries: `[r(2N−r+1) − l(l−1)] / [N(N+1)]`.
pub fn uniform_bucket_probability(n: u64, l: u64, r: u64) -> f64 {
    let (nf, lf, rf) = (n as f64, l as f64, r as f64);
    (rf * (2.0 * nf - rf + 1.0) - lf * (lf - 1.0)) / (nf * (nf + 1.0))
}

/// Result of a completed range query after filtering.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QueryResult {
    pub id: u64,
    pub l: u64,
    pub r: u64,
    pub records: Vec<Record>,
    /// Batch index at which the query was registered (for latency metrics).
    pub issued_at: u64,
}

/// A client range query awaiting bucket replies.
#[derive(Debug)]
pub struct PendingQuery {
    pub id: u64,
    pub l: u64,
    pub r: u64,
    pub cnt: usize,
    pub data: Vec<Record>,
    pub issued_at: u64,
}

/// Tracks in-flight range queries and which buckets they still await.
#[derive(Debug, Default)]
pub struct PendingRegistry {
    queries: HashMap<u64, PendingQuery>,
    per_bucket: HashMap<(u16, u64), Vec<u64>>,
    next_id: u64,
}

impl PendingRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn open(&mut self, l: u64, r: u64, issued_at: u64) -> u64 {
        let id = self.next_id;
        self.next_id += 1;
        self.queries.insert(
            id,
            PendingQuery {
                id,
                l,
                r,
                cnt: 0,
                data: Vec::new(),
                issued_at,
            },
        );
        id
    }

    pub fn pending_count(&self) -> usize {
        self.queries.len()
    }

    pub fn query(&self, id: u64) -> Option<&PendingQuery> {
        self.queries.get(&id)
    }

    /// Adds records to a query's accumulator without touching its bucket
    /// count (used for proxy-local buffered records at issue time).
    pub fn add_data(&mut self, id: u64, records: Vec<Record>) {
        let q = self.queries.get_mut(&id).expect("add data to open query");
        q.data.extend(records);
    }

    /// Attaches query `id` to a span of buckets on one level.
    pub fn attach(&mut self, id: u64, level: u16, span: impl Iterator<Item = u64>) {
        let q = self.queries.get_mut(&id).expect("attach to open query");
        for bucket in span {
            q.cnt += 1;
            self.per_bucket.entry((level, bucket)).or_default().push(id);
        }
    }

    /// Detaches query `id` from one bucket without supplying data (used when
    /// the bucket is destroyed by a rebuild).
    pub fn detach(&mut self, id: u64, level: u16, bucket: u64) {
        if let Some(list) = self.per_bucket.get_mut(&(level, bucket)) {
            if let Some(pos) = list.iter().position(|&q| q == id) {
                list.swap_remove(pos);
            }
        }
        if let Some(q) = self.queries.get_mut(&id) {
            q.cnt -= 1;
        }
    }

    /// Decrements the outstanding-bucket count of query `id` without
    /// supplying data (the bucket's pending list was already drained by
    /// [`PendingRegistry::take_bucket_pending`] during a rebuild).
    pub fn decrement(&mut self, id: u64) {
        if let Some(q) = self.queries.get_mut(&id) {
            q.cnt -= 1;
        }
    }

    /// Query ids pending on one bucket; drains the bucket's list.
    pub fn take_bucket_pending(&mut self, level: u16, bucket: u64) -> Vec<u64> {
        self.per_bucket.remove(&(level, bucket)).unwrap_or_default()
    }

    pub fn bucket_pending(&self, level: u16, bucket: u64) -> &[u64] {
        self.per_bucket
            .get(&(level, bucket))
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    /// Feeds one bucket's decoded records to every query pending on it.
    /// Returns the queries completed by this reply, filtered and finalized.
    pub fn reply(&mut self, level: u16, bucket: u64, records: &[Record]) -> Vec<QueryResult> {
        let ids = self.take_bucket_pending(level, bucket);
        let mut done = Vec::new();
        for id in ids {
            let q = self.queries.get_mut(&id).expect("pending query exists");
            q.data.extend_from_slice(records);
            q.cnt -= 1;
            if q.cnt == 0 {
                done.push(self.finalize(id));
            }
        }
        done
    }

    /// Completes query `id` if no buckets remain outstanding (used after
    /// pending-query transformation may drop its count to zero).
    pub fn complete_if_done(&mut self, id: u64) -> Option<QueryResult> {
        if self.queries.get(&id).is_some_and(|q| q.cnt == 0) {
            Some(self.finalize(id))
        } else {
            None
        }
    }

    fn finalize(&mut self, id: u64) -> QueryResult {
        let q = self.queries.remove(&id).expect("finalize open query");
        QueryResult {
            id: q.id,
            l: q.l,
            r: q.r,
            records: filter_results(q.data, q.l, q.r),
            issued_at: q.issued_at,
        }
    }
}

/// Filters accumulated bucket contents to the exact query answer: keep keys
/// in `[l, r]`, drop dummies, resolve duplicates by highest sequence number,
/// and cancel tombstones.
pub fn filter_results(data: Vec<Record>, l: u64, r: u64) -> Vec<Record> {
    let mut freshest: HashMap<u64, Record> = HashMap::new();
    for rec in data {
        if rec.is_dummy() || rec.key < l || rec.key > r {
            continue;
        }
        match freshest.get(&rec.key) {
            Some(cur) if cur.seq >= rec.seq => {}
            _ => {
                freshest.insert(rec.key, rec);
            }
        }
    }
    let mut out: Vec<Record> = freshest.into_values().filter(|r| !r.tombstone).collect();
    out.sort_by_key(|r| r.key);
    out
}

/// Binary-searches the covering bucket span `[b_l, b_r]` for query `[l, r]`
/// over tags sorted by lower endpoint. Returns `None` when no bucket
/// intersects the query. `comparisons`, when supplied, counts tag probes.
pub fn covering_span(
    tags: &[Tag],
    l: u64,
    r: u64,
    mut comparisons: Option<&mut usize>,
) -> Option<(usize, usize)> {
    // All-dummy padding buckets sort last; search only the real prefix so
    // both predicates stay monotone.
    let real = tags.partition_point(|t| t.l != DUMMY_KEY);
    if real == 0 {
        return None;
    }
    let probe = |c: &mut Option<&mut usize>| {
        if let Some(c) = c.as_deref_mut() {
            *c += 1;
        }
    };
    // b_l: first bucket whose upper end reaches the query.
    let mut lo = 0usize;
    let mut hi = real;
    while lo < hi {
        let mid = (lo + hi) / 2;
        probe(&mut comparisons);
        if tags[mid].r < l {
            lo = mid + 1;
        } else {
            hi = mid;
        }
    }
    let b_l = lo;
    // b_r: last bucket whose lower end does not pass the query.
    let mut lo = 0usize;
    let mut hi = real;
    while lo < hi {
        let mid = (lo + hi) / 2;
        probe(&mut comparisons);
        if tags[mid].l <= r {
            lo = mid + 1;
        } else {
            hi = mid;
        }
    }
    if lo == 0 {
        return None;
    }
    let b_r = lo - 1;
    if b_l > b_r {
        None
    } else {
        Some((b_l, b_r))
    }
}

/// Partitions query `[l, r]` over one level's tags: registers the query on
/// every covering bucket and puts one randomly chosen replica of each into
/// the sampling pool.
///
/// Returns the number of buckets attached (0 means the level contributes
/// nothing; the caller emits an empty reply if no level contributes).
pub fn partition(
    tags: &[Tag],
    level: u16,
    replica_counts: &[u16],
    id: u64,
    l: u64,
    r: u64,
    registry: &mut PendingRegistry,
    pool: &mut Pool,
    rng: &mut impl rand::RngCore,
) -> usize {
    use rand::Rng;
    let Some((b_l, b_r)) = covering_span(tags, l, r, None) else {
        return 0;
    };
    registry.attach(id, level, (b_l as u64)..=(b_r as u64));
    for bucket in b_l..=b_r {
        let replica = rng.gen_range(0..replica_counts[bucket]);
        pool.put(ReplicaId::new(level, bucket as u64, replica));
    }
    b_r - b_l + 1
}
