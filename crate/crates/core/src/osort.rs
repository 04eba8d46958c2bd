//! Oblivious bitonic sorting and shuffling over fixed-size elements.
//!
//! The compare-exchange schedule of a bitonic network is a function of the
//! (padded) input length only, so the memory-access structure reveals nothing
//! about the data. Non-power-of-two inputs are padded with sentinels that sort
//! after every real element and are stripped before returning.

use rand::RngCore;

/// The compare-exchange schedule of one sort run, grouped by network stage.
///
/// Pairs within one stage are disjoint and may execute concurrently; the
/// whole trace is identical for every input of the same padded length.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SortTrace {
    pub stages: Vec<Vec<(usize, usize)>>,
}

impl SortTrace {
    pub fn compare_exchange_count(&self) -> usize {
        self.stages.iter().map(|s| s.len()).sum()
    }

    pub fn flat(&self) -> Vec<(usize, usize)> {
        self.stages.iter().flatten().copied().collect()
    }
}

/// Closed-form network size for a padded length `n` (a power of two).
pub fn network_size(n: usize) -> usize {
    if n <= 1 {
        return 0;
    }
    let m = n.trailing_zeros() as usize;
    n / 2 * m * (m + 1) / 2
}

fn padded_len(n: usize) -> usize {
    n.max(1).next_power_of_two()
}

fn bitonic_pass<T, K: Ord, F: Fn(&T) -> K>(
    slots: &mut [Option<T>],
    key_of: &F,
    trace: Option<&mut SortTrace>,
) {
    // None sorts after every real element.
    let le = |a: &Option<T>, b: &Option<T>| -> bool {
        match (a, b) {
            (Some(x), Some(y)) => key_of(x) <= key_of(y),
            (Some(_), None) => true,
            (None, _) => false,
        }
    };
    bitonic_pass_by(slots, &le, trace);
}

fn bitonic_pass_by<T, F: Fn(&T, &T) -> bool>(
    slots: &mut [T],
    le: &F,
    trace: Option<&mut SortTrace>,
) {
    let n = slots.len();
    debug_assert!(n.is_power_of_two());
    let mut local_trace = trace;
    let mut k = 2;
    while k <= n {
        let mut j = k / 2;
        while j > 0 {
            let mut stage = Vec::with_capacity(n / 2);
            for i in 0..n {
                let l = i ^ j;
                if l > i {
                    let ascending = i & k == 0;
                    let in_order = le(&slots[i], &slots[l]);
                    if in_order != ascending {
                        slots.swap(i, l);
                    }
                    stage.push((i, l));
                }
            }
            if let Some(t) = local_trace.as_deref_mut() {
                t.stages.push(stage);
            }
            j /= 2;
        }
        k *= 2;
    }
}

/// In-place bitonic sort of a power-of-two slot array by natural order;
/// `None` sentinels sort last.
pub fn oblivious_sort_slots<T: Ord>(slots: &mut [Option<T>]) {
    assert!(slots.len().is_power_of_two());
    let le = |a: &Option<T>, b: &Option<T>| -> bool {
        match (a, b) {
            (Some(x), Some(y)) => x <= y,
            (Some(_), None) => true,
            (None, _) => false,
        }
    };
    bitonic_pass_by(slots, &le, None);
}

/// Sorts `items` ascending by `key_of` with a bitonic network.
pub fn oblivious_sort<T, K: Ord>(items: Vec<T>, key_of: impl Fn(&T) -> K) -> Vec<T> {
    oblivious_sort_impl(items, key_of, None::<&mut SortTrace>)
}

/// As [`oblivious_sort`], also returning the compare-exchange trace.
pub fn oblivious_sort_traced<T, K: Ord>(
    items: Vec<T>,
    key_of: impl Fn(&T) -> K,
) -> (Vec<T>, SortTrace) {
    let mut trace = SortTrace { stages: Vec::new() };
    let out = oblivious_sort_impl(items, key_of, Some(&mut trace));
    (out, trace)
}

fn oblivious_sort_impl<T, K: Ord, F: Fn(&T) -> K>(
    items: Vec<T>,
    key_of: F,
    trace: Option<&mut SortTrace>,
) -> Vec<T> {
    let n = items.len();
    if n <= 1 {
        return items;
    }
    let padded = padded_len(n);
    let mut slots: Vec<Option<T>> = items.into_iter().map(Some).collect();
    slots.resize_with(padded, || None);
    bitonic_pass(&mut slots, &key_of, trace);
    slots.truncate(n);
    slots.into_iter().map(|s| s.expect("sentinels sort last")).collect()
}

/// Uniformly permutes `items` by sorting under fresh 64-bit random weights.
///
/// At 64 bits the weight-collision probability is negligible for any
/// realistic input size, so each permutation is (essentially) equally likely.
pub fn oblivious_shuffle<T>(items: Vec<T>, rng: &mut impl RngCore) -> Vec<T> {
    let weighted: Vec<(u64, T)> = items.into_iter().map(|t| (rng.next_u64(), t)).collect();
    oblivious_sort(weighted, |(w, _)| *w)
        .into_iter()
        .map(|(_, t)| t)
        .collect()
}
