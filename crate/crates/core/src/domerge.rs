//! Differentially oblivious merge machinery: discrete truncated-Laplace
//! noise, numeric minimum-bin-capacity computation, noisy bin packing, and
//! 2-way / k-way merging through a fixed-capacity oblivious buffer.
//!
//! A merge of two sorted lists hides the interleaving order up to an
//! (ε, δ) differential-obliviousness guarantee: each list is packed into
//! bins of fixed capacity Ξ whose real loads are Ξ/2 plus truncated
//! Laplace noise, and the merge ingests whole bins, so the adversary sees
//! only the noisy bin interleaving plus fixed-shape buffer traffic.

use crate::error::{Error, Result};
use crate::osort;

/// Discrete truncated Laplace distribution on `[-t, t]` with
/// `Pr[x] ∝ exp(-|x|·ε)`.
#[derive(Debug, Clone)]
pub struct TruncLaplace {
    t: i64,
    eps: f64,
    pmf: Vec<f64>,
    cdf: Vec<f64>,
}

impl TruncLaplace {
    pub fn new(eps: f64, t: i64) -> Result<Self> {
        if t < 1 || eps <= 0.0 {
            return Err(Error::Config(format!(
                "truncated Laplace needs t >= 1 and eps > 0, got t={t} eps={eps}"
            )));
        }
        let mut pmf: Vec<f64> = (-t..=t).map(|x| (-(x.abs() as f64) * eps).exp()).collect();
        let total: f64 = pmf.iter().sum();
        pmf.iter_mut().for_each(|p| *p /= total);
        let mut cdf = Vec::with_capacity(pmf.len());
        let mut acc = 0.0;
        for p in &pmf {
            acc += p;
            cdf.push(acc);
        }
        Ok(Self { t, eps, pmf, cdf })
    }

    pub fn truncation(&self) -> i64 {
        self.t
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    pub fn pmf(&self, x: i64) -> f64 {
        if x.abs() > self.t {
            0.0
        } else {
            self.pmf[(x + self.t) as usize]
        }
    }

    pub fn sample(&self, rng: &mut impl rand::Rng) -> i64 {
        let u: f64 = rng.gen();
        let idx = self.cdf.partition_point(|&c| c < u).min(self.pmf.len() - 1);
        idx as i64 - self.t
    }
}

/// Theoretical lower bound on the bin capacity, Ξ_T = ⌈ε⁻¹·log₂⁵λ⌉
/// (constant taken as 1). Used as a comparison baseline and as the upper
/// bracket of the numeric search.
pub fn theoretical_bin_capacity(eps: f64, lambda: f64) -> u64 {
    let l = lambda.log2();
    (l.powi(5) / eps).ceil() as u64
}

/// Result of the numeric minimum-capacity search.
#[derive(Debug, Clone, Copy)]
pub struct CapacityResult {
    /// Minimal feasible bin capacity on the search lattice.
    pub xi: u64,
    /// Bins allocated for Z real elements: ⌈2Z / (Ξ(1 − log₂⁻²λ))⌉.
    pub bhat: u64,
    /// Exact probability that B̂ noisy bins hold fewer than Z elements.
    pub failure_prob: f64,
}

/// Search lattice step; multiples of 4 keep both Ξ/2 and the truncation
/// Ξ/4 integral.
pub const CAPACITY_SEARCH_STEP: u64 = 4;

/// A probability mass function over a contiguous integer range.
#[derive(Debug, Clone)]
struct Pmf {
    min: i64,
    p: Vec<f64>,
}

impl Pmf {
    /// Mass entries below this threshold are dropped after convolution;
    /// their total contribution is many orders of magnitude below any
    /// failure probability of interest (δ ≥ e^{-log₂²λ} ≈ 1e-44 at λ=1024).
    const PRUNE: f64 = 1e-100;

    fn convolve(&self, other: &Pmf) -> Pmf {
        let mut p = vec![0.0f64; self.p.len() + other.p.len() - 1];
        for (i, &a) in self.p.iter().enumerate() {
            if a < Self::PRUNE {
                continue;
            }
            for (j, &b) in other.p.iter().enumerate() {
                p[i + j] += a * b;
            }
        }
        let mut min = self.min + other.min;
        let lead = p.iter().take_while(|&&v| v < Self::PRUNE).count();
        let trail = p.iter().rev().take_while(|&&v| v < Self::PRUNE).count();
        if lead + trail < p.len() {
            p.drain(..lead);
            p.truncate(p.len() - trail);
            min += lead as i64;
        }
        let total: f64 = p.iter().sum();
        p.iter_mut().for_each(|v| *v /= total);
        Pmf { min, p }
    }

    /// n-fold convolution power by binary exponentiation.
    fn power(&self, n: u64) -> Pmf {
        assert!(n >= 1);
        let mut result: Option<Pmf> = None;
        let mut base = self.clone();
        let mut n = n;
        loop {
            if n & 1 == 1 {
                result = Some(match result {
                    None => base.clone(),
                    Some(r) => r.convolve(&base),
                });
            }
            n >>= 1;
            if n == 0 {
                break;
            }
            base = base.convolve(&base);
        }
        result.unwrap()
    }

    /// Pr[X < c].
    fn cdf_below(&self, c: i64) -> f64 {
        self.p
            .iter()
            .enumerate()
            .take_while(|(i, _)| self.min + *i as i64 <= c - 1)
            .map(|(_, &v)| v)
            .sum()
    }
}

fn delta_for(lambda: f64) -> f64 {
    (-lambda.log2().powi(2)).exp()
}

fn bhat_for(z: u64, xi: u64, lambda: f64) -> u64 {
    let l2 = lambda.log2().powi(2);
    ((2.0 * z as f64) / (xi as f64 * (1.0 - 1.0 / l2))).ceil() as u64
}

/// Exact failure probability for capacity `xi`: the chance that B̂ bins with
/// loads Ξ/2 + η_i hold fewer than Z real elements, via convolution of the
/// noise pmf.
pub fn capacity_failure_prob(z: u64, eps: f64, lambda: f64, xi: u64) -> Result<CapacityResult> {
    let t = (xi / 4).max(1) as i64;
    let noise = TruncLaplace::new(eps, t)?;
    let bhat = bhat_for(z, xi, lambda);
    let single = Pmf {
        min: -t,
        p: noise.pmf.clone(),
    };
    let sum = single.power(bhat);
    // Σ(Ξ/2 + η_i) < Z  ⇔  Ση < Z − B̂·Ξ/2.
    let threshold = z as i64 - (bhat * xi / 2) as i64;
    Ok(CapacityResult {
        xi,
        bhat,
        failure_prob: sum.cdf_below(threshold),
    })
}

/// Finds the minimal bin capacity (on the lattice of multiples of 4) whose
/// exact failure probability is at most δ = exp(−log₂²λ).
///
/// Feasibility is not monotone in Ξ: the ceiling in B̂ makes the slack
/// B̂·Ξ/2 − Z saw-tooth, so a pure bisection can land inside an infeasible
/// notch. The search bisects first, then repairs: walk up until feasible,
/// then walk down while the next-lower lattice point stays feasible. The
/// result always satisfies f(Ξ) ≤ δ and f(Ξ − step) > δ.
pub fn compute_bin_capacity(z: u64, eps: f64, lambda: f64) -> Result<CapacityResult> {
    let step = CAPACITY_SEARCH_STEP;
    let delta = delta_for(lambda);
    let feasible = |xi: u64| -> Result<bool> {
        Ok(capacity_failure_prob(z, eps, lambda, xi)?.failure_prob <= delta)
    };
    let hi_xi = (4 * theoretical_bin_capacity(eps, lambda)).div_ceil(step) * step;
    if !feasible(hi_xi)? {
        return Err(Error::CapacitySearch {
            bound: hi_xi as usize,
        });
    }
    // Bisect on lattice indices (treating feasibility as if monotone).
    let mut lo = 1u64; // xi = 4
    let mut hi = hi_xi / step; // known feasible
    while lo < hi {
        let mid = (lo + hi) / 2;
        if feasible(mid * step)? {
            hi = mid;
        } else {
            lo = mid + 1;
        }
    }
    let mut idx = hi;
    // Repair against non-monotone notches.
    while !feasible(idx * step)? {
        idx += 1;
    }
    while idx > 1 && feasible((idx - 1) * step)? {
        idx -= 1;
    }
    capacity_failure_prob(z, eps, lambda, idx * step)
}

/// A sorted list packed into fixed-capacity bins with noisy real loads.
/// Physical slots are `Option<T>`: `Some` for real elements (in order),
/// `None` for padding dummies.
#[derive(Debug, Clone)]
pub struct BinList<T> {
    pub xi: usize,
    pub bins: Vec<Vec<Option<T>>>,
    /// Real-element count per bin.
    pub loads: Vec<usize>,
    /// Key of the last real element per bin (`None` for an all-dummy bin).
    pub pivots: Vec<Option<T>>,
}

impl<T: Clone + Ord> BinList<T> {
    /// Builds a BinList from explicit per-bin real contents (test and
    /// internal use; `bin_pack` is the noisy production path).
    pub fn from_bins(xi: usize, reals: Vec<Vec<T>>) -> Self {
        let mut bins = Vec::with_capacity(reals.len());
        let mut loads = Vec::with_capacity(reals.len());
        let mut pivots = Vec::with_capacity(reals.len());
        for r in reals {
            assert!(r.len() <= xi, "bin load exceeds capacity");
            loads.push(r.len());
            pivots.push(r.last().cloned());
            let mut slots: Vec<Option<T>> = r.into_iter().map(Some).collect();
            slots.resize(xi, None);
            bins.push(slots);
        }
        Self {
            xi,
            bins,
            loads,
            pivots,
        }
    }

    pub fn total_real(&self) -> usize {
        self.loads.iter().sum()
    }

    /// First real element at or after bin `from` (the merge frontier);
    /// `None` when the remainder of the list is empty.
    fn frontier(&self, from: usize) -> Option<&T> {
        self.bins[from..]
            .iter()
            .flat_map(|b| b.iter())
            .find_map(|s| s.as_ref())
    }
}

/// Packs a sorted sequence into bins of capacity `xi` whose real loads are
/// `clamp(Ξ/2 + η, 0, Ξ)` with truncated Laplace η (t = Ξ/4), padding each
/// bin to Ξ with dummies. Bins are appended until the input is exhausted.
pub fn bin_pack<T: Clone + Ord>(
    items: &[T],
    xi: usize,
    eps: f64,
    rng: &mut impl rand::Rng,
) -> Result<BinList<T>> {
    if xi < 4 {
        return Err(Error::Config(format!("bin capacity {xi} below minimum 4")));
    }
    let noise = TruncLaplace::new(eps, (xi / 4) as i64)?;
    let mut reals = Vec::new();
    let mut rest = items;
    while !rest.is_empty() {
        let load = ((xi / 2) as i64 + noise.sample(rng)).clamp(0, xi as i64) as usize;
        let take = load.min(rest.len());
        reals.push(rest[..take].to_vec());
        rest = &rest[take..];
        // A zero-load draw adds an all-dummy bin and progress stalls only
        // for that round; the loop still terminates because the expected
        // load is Ξ/2 > 0.
    }
    Ok(BinList::from_bins(xi, reals))
}

/// Oblivious working buffer factor: capacity is `6·Ξ` for a 2-way merge,
/// above the (2k+1)·Ξ safe-bin requirement with k = 2.
pub const MERGE_BUFFER_FACTOR: usize = 6;

/// Merges two bin-packed sorted lists. Each iteration ingests the whole
/// next bin of the list whose frontier (first un-ingested real element) is
/// smaller, obliviously sorts the fixed-capacity buffer, and evicts as
/// final every real element ≤ the smaller of the two frontiers. Eviction
/// is safe because every un-ingested element of a list is ≥ that list's
/// frontier.
pub fn do_merge2<T: Clone + Ord>(a: &BinList<T>, b: &BinList<T>) -> Result<Vec<T>> {
    assert_eq!(a.xi, b.xi, "merging bin lists of different capacity");
    let xi = a.xi;
    let cap = MERGE_BUFFER_FACTOR * xi;
    // Physical buffer padded to a power of two for the bitonic network;
    // the occupancy limit stays at 6Ξ.
    let mut buffer: Vec<Option<T>> = vec![None; cap.max(1).next_power_of_two()];
    let mut occupancy = 0usize;
    let mut out = Vec::with_capacity(a.total_real() + b.total_real());
    let (mut ia, mut ib) = (0usize, 0usize);

    loop {
        let fa = a.frontier(ia);
        let fb = b.frontier(ib);
        let ingest_a = match (fa, fb) {
            (Some(x), Some(y)) => x <= y,
            (Some(_), None) => true,
            (None, Some(_)) => false,
            (None, None) => {
                // Both lists exhausted of reals: drain the buffer.
                buffer.retain(|s| s.is_some());
                buffer.sort();
                out.extend(buffer.drain(..).flatten());
                break;
            }
        };
        let (list, idx) = if ingest_a {
            (a, &mut ia)
        } else {
            (b, &mut ib)
        };
        // Ingest every bin up to and including the one holding the chosen
        // frontier; leading all-dummy bins cost nothing but must advance.
        loop {
            let bin = &list.bins[*idx];
            let load = list.loads[*idx];
            *idx += 1;
            if occupancy + load > cap {
                return Err(Error::BufferOverflow {
                    occupancy: occupancy + load,
                    capacity: cap,
                });
            }
            let mut free = buffer.iter_mut().filter(|s| s.is_none());
            for slot in bin.iter().filter(|s| s.is_some()) {
                *free.next().expect("occupancy accounting") = slot.clone();
            }
            occupancy += load;
            if load > 0 {
                break;
            }
        }
        osort::oblivious_sort_slots(&mut buffer);
        // Evict the final prefix: reals ≤ min of both frontiers.
        let limit = match (a.frontier(ia), b.frontier(ib)) {
            (Some(x), Some(y)) => Some(if x <= y { x } else { y }),
            (Some(x), None) => Some(x),
            (None, Some(y)) => Some(y),
            (None, None) => None,
        };
        let evict = buffer
            .iter()
            .take_while(|s| {
                s.as_ref()
                    .is_some_and(|v| limit.is_none_or(|lim| v <= lim))
            })
            .count();
        for slot in &mut buffer[..evict] {
            out.push(slot.take().expect("evicting real element"));
        }
        occupancy -= evict;
    }
    Ok(out)
}

/// Merges k sorted sequences by ⌈log₂k⌉ rounds of pairwise bin-packed
/// merges. Every element participates in at most ⌈log₂k⌉ two-way merges,
/// so the privacy budget composes to ε·⌈log₂k⌉ per rebuild.
pub fn k_way_merge<T: Clone + Ord>(
    arrays: Vec<Vec<T>>,
    xi: usize,
    eps: f64,
    rng: &mut impl rand::Rng,
) -> Result<Vec<T>> {
    let mut round: Vec<Vec<T>> = arrays.into_iter().filter(|a| !a.is_empty()).collect();
    if round.is_empty() {
        return Ok(Vec::new());
    }
    while round.len() > 1 {
        let mut next = Vec::with_capacity(round.len().div_ceil(2));
        let mut iter = round.into_iter();
        while let Some(first) = iter.next() {
            match iter.next() {
                Some(second) => {
                    let a = bin_pack(&first, xi, eps, rng)?;
                    let b = bin_pack(&second, xi, eps, rng)?;
                    next.push(do_merge2(&a, &b)?);
                }
                None => next.push(first),
            }
        }
        round = next;
    }
    Ok(round.pop().unwrap())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng;

    #[test]
    fn trunc_laplace_support_and_symmetry() {
        let d = TruncLaplace::new(1.0, 10).unwrap();
        let total: f64 = (-10..=10).map(|x| d.pmf(x)).sum();
        assert!((total - 1.0).abs() < 1e-12);
        for x in 0..=10 {
            assert!((d.pmf(x) - d.pmf(-x)).abs() < 1e-15);
        }
        assert_eq!(d.pmf(11), 0.0);
        let mut r = rng::fork(51, "domerge-test");
        for _ in 0..1000 {
            let x = d.sample(&mut r);
            assert!((-10..=10).contains(&x));
        }
    }

    #[test]
    fn trunc_laplace_empirical_matches_pmf() {
        let d = TruncLaplace::new(0.5, 8).unwrap();
        let mut r = rng::fork(52, "domerge-test");
        let trials = 200_000usize;
        let mut counts = vec![0usize; 17];
        for _ in 0..trials {
            counts[(d.sample(&mut r) + 8) as usize] += 1;
        }
        for x in -8i64..=8 {
            let want = d.pmf(x) * trials as f64;
            let got = counts[(x + 8) as usize] as f64;
            let sd = (want.max(1.0)).sqrt();
            assert!((got - want).abs() < 5.0 * sd, "x={x}: {got} vs {want}");
        }
    }

    #[test]
    fn theoretical_capacity_reference_values() {
        // ε=0.1, λ=512: 10 · 9⁵ = 590490.
        assert_eq!(theoretical_bin_capacity(0.1, 512.0), 590_490);
        assert_eq!(theoretical_bin_capacity(1.0, 512.0), 59_049);
        // Halving ε doubles the bound.
        assert_eq!(
            theoretical_bin_capacity(0.5, 512.0),
            2 * theoretical_bin_capacity(1.0, 512.0)
        );
    }

    #[test]
    fn capacity_search_default_parameters() {
        let res = compute_bin_capacity(512, 1.0, 512.0).unwrap();
        let delta = (-(512f64).log2().powi(2)).exp();
        assert!(res.failure_prob <= delta, "{:?}", res);
        assert!(res.xi <= theoretical_bin_capacity(1.0, 512.0));
        // One lattice step below must be infeasible.
        let below = capacity_failure_prob(512, 1.0, 512.0, res.xi - 4).unwrap();
        assert!(below.failure_prob > delta);
    }

    #[test]
    fn capacity_shrinks_for_looser_delta() {
        let strict = compute_bin_capacity(512, 1.0, 512.0).unwrap();
        let loose = compute_bin_capacity(512, 1.0, 4.0).unwrap();
        assert!(loose.xi < strict.xi, "{} !< {}", loose.xi, strict.xi);
    }

    #[test]
    fn capacity_nonincreasing_in_eps() {
        let mut last = u64::MAX;
        for eps in [0.1, 0.5, 1.0, 2.0] {
            let res = compute_bin_capacity(512, eps, 512.0).unwrap();
            assert!(res.xi <= last, "eps={eps}: {} > {last}", res.xi);
            last = res.xi;
        }
    }

    #[test]
    fn bin_pack_empty_input() {
        let mut r = rng::fork(53, "domerge-test");
        let packed = bin_pack::<u64>(&[], 16, 1.0, &mut r).unwrap();
        assert!(packed.bins.is_empty());
        assert_eq!(packed.total_real(), 0);
    }

    #[test]
    fn bin_pack_zero_noise_fills_half_bins() {
        // Huge ε concentrates the noise at 0, so every load is exactly Ξ/2.
        let mut r = rng::fork(54, "domerge-test");
        let items: Vec<u64> = (0..100).collect();
        let packed = bin_pack(&items, 16, 1e9, &mut r).unwrap();
        assert_eq!(packed.bins.len(), 13); // ⌈2·100/16⌉
        assert!(packed.loads[..12].iter().all(|&l| l == 8));
        assert_eq!(packed.loads[12], 4);
    }

    #[test]
    fn bin_pack_is_identity_on_reals() {
        let mut r = rng::fork(55, "domerge-test");
        for _ in 0..200 {
            let n = r.gen_range(0..200usize);
            let mut items: Vec<u64> = (0..n).map(|_| r.gen_range(0..1000)).collect();
            items.sort();
            let packed = bin_pack(&items, 16, 1.0, &mut r).unwrap();
            let flat: Vec<u64> = packed
                .bins
                .iter()
                .flat_map(|b| b.iter())
                .filter_map(|s| *s)
                .collect();
            assert_eq!(flat, items);
            assert_eq!(packed.total_real(), n);
            for (i, bin) in packed.bins.iter().enumerate() {
                assert_eq!(bin.len(), 16);
                assert!(packed.loads[i] <= 16);
            }
            // Pivots nondecreasing over nonempty bins.
            let pivots: Vec<u64> = packed.pivots.iter().filter_map(|p| *p).collect();
            assert!(pivots.windows(2).all(|w| w[0] <= w[1]));
        }
    }

    #[test]
    fn merge_interleaved_sequences() {
        let mut r = rng::fork(56, "domerge-test");
        let a = bin_pack(&[1u64, 3, 5], 4, 1.0, &mut r).unwrap();
        let b = bin_pack(&[2u64, 4, 6], 4, 1.0, &mut r).unwrap();
        assert_eq!(do_merge2(&a, &b).unwrap(), vec![1, 2, 3, 4, 5, 6]);
    }

    #[test]
    fn merge_orders_across_wide_bins() {
        // A's second bin spans past B's bins: (1,2),(3,9) vs (4,5),(6,7).
        // Deciding by last-element pivots would emit 6 and 7 before 3;
        // frontier-based eviction must not.
        let a = BinList::from_bins(4, vec![vec![1u64, 2], vec![3, 9]]);
        let b = BinList::from_bins(4, vec![vec![4u64, 5], vec![6, 7]]);
        assert_eq!(do_merge2(&a, &b).unwrap(), vec![1, 2, 3, 4, 5, 6, 7, 9]);
    }

    #[test]
    fn merge_handles_empty_bins_and_lists() {
        let a = BinList::from_bins(4, vec![vec![], vec![2u64], vec![]]);
        let b = BinList::from_bins(4, vec![vec![1u64, 3]]);
        assert_eq!(do_merge2(&a, &b).unwrap(), vec![1, 2, 3]);

        let empty = BinList::from_bins(4, Vec::<Vec<u64>>::new());
        let b = BinList::from_bins(4, vec![vec![1u64, 3]]);
        assert_eq!(do_merge2(&empty, &b).unwrap(), vec![1, 3]);
        assert_eq!(do_merge2(&b, &empty).unwrap(), vec![1, 3]);
        assert!(do_merge2(&empty, &empty).unwrap().is_empty());
    }

    #[test]
    fn merge_matches_oracle_on_random_instances() {
        let mut r = rng::fork(57, "domerge-test");
        for round in 0..300 {
            let xi = *[4usize, 8, 16, 32].iter().nth(round % 4).unwrap();
            let n = r.gen_range(0..300usize);
            let m = r.gen_range(0..300usize);
            let mut x: Vec<u64> = (0..n).map(|_| r.gen_range(0..500)).collect();
            let mut y: Vec<u64> = (0..m).map(|_| r.gen_range(0..500)).collect();
            x.sort();
            y.sort();
            let mut want: Vec<u64> = x.iter().chain(y.iter()).copied().collect();
            want.sort();
            let a = bin_pack(&x, xi, 1.0, &mut r).unwrap();
            let b = bin_pack(&y, xi, 1.0, &mut r).unwrap();
            assert_eq!(do_merge2(&a, &b).unwrap(), want, "xi={xi} n={n} m={m}");
        }
    }

    #[test]
    fn k_way_matches_oracle() {
        let mut r = rng::fork(58, "domerge-test");
        for &k in &[1usize, 2, 3, 5, 8] {
            let mut want = Vec::new();
            let mut arrays = Vec::new();
            for _ in 0..k {
                let n = r.gen_range(0..200usize);
                let mut a: Vec<u64> = (0..n).map(|_| r.gen_range(0..1000)).collect();
                a.sort();
                want.extend_from_slice(&a);
                arrays.push(a);
            }
            want.sort();
            assert_eq!(k_way_merge(arrays, 16, 1.0, &mut r).unwrap(), want);
        }
    }
}
