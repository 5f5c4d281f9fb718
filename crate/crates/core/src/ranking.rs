//! Hamming rank lists and retrieval metrics.
//!
//! Positions in a [`RankList`] are zero-based: position 0 is the top result.
//! Average precision is normalized by the number of relevant items present
//! in the list itself, so two permutations of the same list are always
//! comparable and a swap delta lies in `[0,1]`.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::codes::PackedCode;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct RankList {
    query: usize,
    order: Vec<usize>,
    distances: Vec<u32>,
    relevance: Vec<bool>,
    /// `prefix[p]` = relevant items among positions `0..p`.
    prefix: Vec<u32>,
}

impl RankList {
    /// Ranks `candidates` (item index, code) by ascending Hamming distance
    /// to `query_code`, breaking ties by ascending item index.
    pub fn rank<'a, I, F>(query: usize, query_code: &PackedCode, candidates: I, relevant: F) -> Result<Self>
    where
        I: IntoIterator<Item = (usize, &'a PackedCode)>,
        F: Fn(usize) -> bool,
    {
        let mut scored = Vec::new();
        for (idx, code) in candidates {
            if code.bit_len() != query_code.bit_len() {
                return Err(Error::Dimension {
                    expected: query_code.bit_len(),
                    actual: code.bit_len(),
                });
            }
            scored.push((query_code.hamming_unchecked(code), idx));
        }
        scored.sort_unstable();
        let relevance: Vec<bool> = scored.iter().map(|&(_, i)| relevant(i)).collect();
        Ok(Self {
            query,
            distances: scored.iter().map(|&(d, _)| d).collect(),
            order: scored.into_iter().map(|(_, i)| i).collect(),
            prefix: prefix_counts(&relevance),
            relevance,
        })
    }

    /// A list with explicit relevance flags and no distances, for metric
    /// computations over a ranking obtained elsewhere. Items are numbered by
    /// their position.
    pub fn from_relevance(relevance: Vec<bool>) -> Self {
        Self {
            query: usize::MAX,
            order: (0..relevance.len()).collect(),
            distances: vec![0; relevance.len()],
            prefix: prefix_counts(&relevance),
            relevance,
        }
    }

    pub fn query_index(&self) -> usize {
        self.query
    }

    pub fn order(&self) -> &[usize] {
        &self.order
    }

    pub fn distances(&self) -> &[u32] {
        &self.distances
    }

    pub fn relevance(&self) -> &[bool] {
        &self.relevance
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn num_relevant(&self) -> usize {
        self.prefix.last().copied().unwrap_or(0) as usize
    }

    /// Relevant items in the top `n` positions.
    pub fn relevant_in_top(&self, n: usize) -> usize {
        self.prefix[n.min(self.len())] as usize
    }

    /// Copy of the list with positions `a` and `b` exchanged.
    pub fn with_swapped(&self, a: usize, b: usize) -> Result<Self> {
        self.check_position(a)?;
        self.check_position(b)?;
        let mut out = self.clone();
        out.order.swap(a, b);
        out.relevance.swap(a, b);
        out.prefix = prefix_counts(&out.relevance);
        Ok(out)
    }

    fn check_position(&self, p: usize) -> Result<()> {
        if p >= self.len() {
            return Err(Error::Index {
                index: p,
                len: self.len(),
            });
        }
        Ok(())
    }
}

fn prefix_counts(relevance: &[bool]) -> Vec<u32> {
    let mut prefix = Vec::with_capacity(relevance.len() + 1);
    let mut acc = 0u32;
    prefix.push(0);
    for &r in relevance {
        acc += r as u32;
        prefix.push(acc);
    }
    prefix
}

/// Ranks every other code in the batch against `codes[query]`.
pub fn build_rank_list<F>(query: usize, codes: &[PackedCode], relevant: F) -> Result<RankList>
where
    F: Fn(usize, usize) -> bool,
{
    if codes.len() < 2 {
        return Err(Error::DegenerateBatch(format!(
            "rank list needs at least 2 codes, got {}",
            codes.len()
        )));
    }
    if query >= codes.len() {
        return Err(Error::Index {
            index: query,
            len: codes.len(),
        });
    }
    RankList::rank(
        query,
        &codes[query],
        codes.iter().enumerate().filter(|&(i, _)| i != query),
        |i| relevant(query, i),
    )
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AveragePrecision {
    Defined(f64),
    /// The list holds no relevant item; AP is reported as 0 and the query is
    /// skipped by MAP.
    NoRelevant,
}

impl AveragePrecision {
    pub fn value(self) -> f64 {
        match self {
            AveragePrecision::Defined(v) => v,
            AveragePrecision::NoRelevant => 0.0,
        }
    }

    pub fn is_defined(self) -> bool {
        matches!(self, AveragePrecision::Defined(_))
    }
}

pub fn average_precision(rl: &RankList) -> AveragePrecision {
    let num_relevant = rl.num_relevant();
    if num_relevant == 0 {
        return AveragePrecision::NoRelevant;
    }
    let sum: f64 = rl
        .relevance
        .iter()
        .enumerate()
        .filter(|(_, &r)| r)
        .map(|(p, _)| rl.prefix[p + 1] as f64 / (p + 1) as f64)
        .sum();
    AveragePrecision::Defined(sum / num_relevant as f64)
}

pub fn mean_average_precision(lists: &[RankList]) -> Result<f64> {
    mean_of_defined(lists.iter().map(average_precision))
}

/// Mean of the defined APs; errors when none is defined.
pub fn mean_of_defined(aps: impl IntoIterator<Item = AveragePrecision>) -> Result<f64> {
    let (sum, n) = aps.into_iter().fold((0.0, 0usize), |(s, n), ap| match ap {
        AveragePrecision::Defined(v) => (s + v, n + 1),
        AveragePrecision::NoRelevant => (s, n),
    });
    if n == 0 {
        return Err(Error::UndefinedMetric(
            "no rank list contains a relevant item".into(),
        ));
    }
    Ok(sum / n as f64)
}

/// `|AP(rl) - AP(rl with positions a and b swapped)|`.
///
/// Only positions strictly between `a` and `b` are visited. With `lo < hi`
/// and the relevant item at `lo` moving down to `hi`, its precision term
/// changes from `C(lo)/lo` to `C(hi)/hi` (1-based ranks, `C` the prefix
/// count) and every relevant item in between loses one from its prefix
/// count. The opposite direction is the mirror image.
pub fn swap_delta_ap(rl: &RankList, a: usize, b: usize) -> Result<f64> {
    rl.check_position(a)?;
    rl.check_position(b)?;
    let (lo, hi) = if a < b { (a, b) } else { (b, a) };
    let (rel_lo, rel_hi) = (rl.relevance[lo], rl.relevance[hi]);
    if lo == hi || rel_lo == rel_hi {
        return Ok(0.0);
    }
    let rank_lo = (lo + 1) as f64;
    let rank_hi = (hi + 1) as f64;
    let between: f64 = (lo + 1..hi)
        .filter(|&p| rl.relevance[p])
        .map(|p| 1.0 / (p + 1) as f64)
        .sum();
    let count_lo = rl.prefix[lo + 1] as f64;
    let count_hi = rl.prefix[hi + 1] as f64;
    let delta = if rel_lo {
        // relevant item drops from lo to hi
        count_lo / rank_lo - count_hi / rank_hi + between
    } else {
        // relevant item rises from hi to lo
        (count_lo + 1.0) / rank_lo - count_hi / rank_hi + between
    };
    Ok(delta / rl.num_relevant() as f64)
}

pub fn precision_at_k(rl: &RankList, k: usize) -> Result<f64> {
    if k == 0 || k > rl.len() {
        return Err(Error::Index {
            index: k,
            len: rl.len(),
        });
    }
    Ok(rl.relevant_in_top(k) as f64 / k as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub cutoff: usize,
    pub recall: f64,
    pub precision: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PrCurve {
    pub points: Vec<PrPoint>,
}

pub fn pr_curve(rl: &RankList) -> Result<PrCurve> {
    let num_relevant = rl.num_relevant();
    if num_relevant == 0 {
        return Err(Error::UndefinedMetric(
            "recall undefined for a list without relevant items".into(),
        ));
    }
    let points = (1..=rl.len())
        .map(|c| {
            let hits = rl.relevant_in_top(c) as f64;
            PrPoint {
                cutoff: c,
                recall: hits / num_relevant as f64,
                precision: hits / c as f64,
            }
        })
        .collect();
    Ok(PrCurve { points })
}

/// Pointwise mean of PR curves over lists with at least one relevant item.
/// All lists must have the same length.
pub fn mean_pr_curve(lists: &[RankList]) -> Result<PrCurve> {
    let eligible: Vec<&RankList> = lists.iter().filter(|rl| rl.num_relevant() > 0).collect();
    let Some(first) = eligible.first() else {
        return Err(Error::UndefinedMetric("no list with relevant items".into()));
    };
    let len = first.len();
    let mut recall = vec![0.0; len];
    let mut precision = vec![0.0; len];
    for rl in &eligible {
        if rl.len() != len {
            return Err(Error::Dimension {
                expected: len,
                actual: rl.len(),
            });
        }
        let nrel = rl.num_relevant() as f64;
        for c in 1..=len {
            let hits = rl.relevant_in_top(c) as f64;
            recall[c - 1] += hits / nrel;
            precision[c - 1] += hits / c as f64;
        }
    }
    let n = eligible.len() as f64;
    Ok(PrCurve {
        points: (0..len)
            .map(|i| PrPoint {
                cutoff: i + 1,
                recall: recall[i] / n,
                precision: precision[i] / n,
            })
            .collect(),
    })
}

/// Writes `cutoff,recall,precision` rows.
pub fn write_pr_csv<W: Write>(mut w: W, curve: &PrCurve) -> std::io::Result<()> {
    writeln!(w, "cutoff,recall,precision")?;
    for p in &curve.points {
        writeln!(w, "{},{:.6},{:.6}", p.cutoff, p.recall, p.precision)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rl(flags: &[u8]) -> RankList {
        RankList::from_relevance(flags.iter().map(|&f| f == 1).collect())
    }

    /// Textbook AP straight from the definition, no prefix table.
    fn ap_oracle(flags: &[bool]) -> Option<f64> {
        let total = flags.iter().filter(|&&f| f).count();
        if total == 0 {
            return None;
        }
        let mut hits = 0.0;
        let mut sum = 0.0;
        for (p, &f) in flags.iter().enumerate() {
            if f {
                hits += 1.0;
                sum += hits / (p as f64 + 1.0);
            }
        }
        Some(sum / total as f64)
    }

    #[test]
    fn rank_list_orders_by_distance_then_index() {
        // distances from item 0 to items 1..3 are [2, 0, 2]
        let q = PackedCode::from_bits(&[false, false, false, false]);
        let codes = vec![
            q.clone(),
            PackedCode::from_bits(&[true, true, false, false]),
            PackedCode::from_bits(&[false, false, false, false]),
            PackedCode::from_bits(&[false, false, true, true]),
        ];
        let list = build_rank_list(0, &codes, |_, _| true).unwrap();
        assert_eq!(list.order(), &[2, 1, 3]);
        assert_eq!(list.distances(), &[0, 2, 2]);

        let same = vec![PackedCode::zeros(3); 5];
        let list = build_rank_list(2, &same, |_, _| false).unwrap();
        assert_eq!(list.order(), &[0, 1, 3, 4]);
        assert_eq!(list.num_relevant(), 0);
    }

    #[test]
    fn rank_list_degenerate_batch() {
        let codes = vec![PackedCode::zeros(4)];
        assert!(matches!(
            build_rank_list(0, &codes, |_, _| true),
            Err(Error::DegenerateBatch(_))
        ));
    }

    #[test]
    fn average_precision_examples() {
        let ap = average_precision(&rl(&[1, 0, 1])).value();
        assert!((ap - 0.5 * (1.0 + 2.0 / 3.0)).abs() < 1e-15);
        assert_eq!(average_precision(&rl(&[1, 1, 1])), AveragePrecision::Defined(1.0));
        assert_eq!(average_precision(&rl(&[0, 1])).value(), 0.5);
        assert_eq!(average_precision(&rl(&[0, 0])), AveragePrecision::NoRelevant);
        assert_eq!(average_precision(&rl(&[0, 0])).value(), 0.0);
    }

    #[test]
    fn map_skips_lists_without_relevant_items() {
        let lists = vec![rl(&[1, 1]), rl(&[0, 1]), rl(&[0, 0, 0])];
        assert_eq!(mean_average_precision(&lists).unwrap(), 0.75);
        assert_eq!(mean_average_precision(&lists[1..2]).unwrap(), 0.5);
        assert!(matches!(
            mean_average_precision(&lists[2..]),
            Err(Error::UndefinedMetric(_))
        ));
    }

    #[test]
    fn swap_delta_examples() {
        assert_eq!(swap_delta_ap(&rl(&[1, 0, 1]), 0, 2).unwrap(), 0.0);
        assert_eq!(swap_delta_ap(&rl(&[0, 1]), 0, 1).unwrap(), 0.5);
        // [0,0,1,1]: AP 5/12; swapping ranks 1 and 3 gives [1,0,0,1], AP 3/4
        let d = swap_delta_ap(&rl(&[0, 0, 1, 1]), 0, 2).unwrap();
        assert!((d - 1.0 / 3.0).abs() < 1e-15);
        assert!(swap_delta_ap(&rl(&[0, 1]), 0, 2).is_err());
    }

    #[test]
    fn precision_and_curve() {
        let list = rl(&[1, 0, 1]);
        assert_eq!(precision_at_k(&list, 1).unwrap(), 1.0);
        assert!((precision_at_k(&list, 3).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert!(precision_at_k(&list, 0).is_err());
        assert!(precision_at_k(&list, 4).is_err());
        let curve = pr_curve(&list).unwrap();
        let pts: Vec<(f64, f64)> = curve.points.iter().map(|p| (p.recall, p.precision)).collect();
        assert_eq!(pts, vec![(0.5, 1.0), (0.5, 0.5), (1.0, 2.0 / 3.0)]);
        assert!(pr_curve(&rl(&[0, 0])).is_err());
    }

    #[test]
    fn pr_csv_format() {
        let mut buf = Vec::new();
        write_pr_csv(&mut buf, &pr_curve(&rl(&[1, 0])).unwrap()).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "cutoff,recall,precision\n1,1.000000,1.000000\n2,1.000000,0.500000\n"
        );
    }

    #[test]
    fn perfect_and_inverted_rankings() {
        for n in 1..12 {
            for m in 1..12 {
                let mut flags = vec![true; n];
                flags.extend(vec![false; m]);
                assert_eq!(average_precision(&RankList::from_relevance(flags.clone())).value(), 1.0);
                flags.reverse();
                let ap = average_precision(&RankList::from_relevance(flags.clone())).value();
                // relevant items occupy ranks m+1..m+n: AP = (1/n) sum_k k/(m+k)
                let closed: f64 = (1..=n).map(|k| k as f64 / (m + k) as f64).sum::<f64>() / n as f64;
                assert!((ap - closed).abs() < 1e-14);
                assert!((ap - ap_oracle(&flags).unwrap()).abs() < 1e-14);
            }
        }
    }

    fn flags_and_positions() -> impl Strategy<Value = (Vec<bool>, usize, usize)> {
        (2usize..300).prop_flat_map(|n| (prop::collection::vec(any::<bool>(), n), 0..n, 0..n))
    }

    proptest! {
        #[test]
        fn swap_delta_matches_recomputation((flags, a, b) in flags_and_positions()) {
            let list = RankList::from_relevance(flags.clone());
            let fast = swap_delta_ap(&list, a, b).unwrap();
            let mut swapped = flags.clone();
            swapped.swap(a, b);
            let slow = match (ap_oracle(&flags), ap_oracle(&swapped)) {
                (Some(x), Some(y)) => (x - y).abs(),
                _ => 0.0,
            };
            prop_assert!((fast - slow).abs() <= 1e-12, "fast {} slow {}", fast, slow);
            prop_assert!((0.0..=1.0).contains(&fast));
            // weight vanishes exactly when the swap leaves AP unchanged
            prop_assert_eq!(fast == 0.0, flags[a] == flags[b]);
        }

        #[test]
        fn ap_matches_oracle(flags in prop::collection::vec(any::<bool>(), 1..200)) {
            let ap = average_precision(&RankList::from_relevance(flags.clone()));
            match ap_oracle(&flags) {
                Some(v) => prop_assert!((ap.value() - v).abs() < 1e-12),
                None => prop_assert_eq!(ap, AveragePrecision::NoRelevant),
            }
        }

        #[test]
        fn ap_invariant_to_same_flag_permutation(
            flags in prop::collection::vec(any::<bool>(), 4..100),
            seed in any::<u64>(),
        ) {
            // shuffle the items sitting on irrelevant positions among themselves
            use rand::{seq::SliceRandom, SeedableRng};
            let base = RankList::from_relevance(flags.clone());
            let mut slots: Vec<usize> = (0..flags.len()).filter(|&p| !flags[p]).collect();
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut targets = slots.clone();
            targets.shuffle(&mut rng);
            let mut permuted = base.clone();
            for (a, b) in slots.drain(..).zip(targets) {
                prop_assert_eq!(swap_delta_ap(&permuted, a, b).unwrap(), 0.0);
                permuted = permuted.with_swapped(a, b).unwrap();
            }
            prop_assert_eq!(average_precision(&base), average_precision(&permuted));
        }

        #[test]
        fn upward_swap_near_top_beats_same_swap_near_bottom(
            middle in prop::collection::vec(any::<bool>(), 1..95),
        ) {
            // [0, x, 1, middle..., 0, 1]
            let mut flags = vec![false, false, true];
            flags.extend(middle);
            flags.extend([false, true]);
            let n = flags.len();
            let list = RankList::from_relevance(flags.clone());
            let before = average_precision(&list).value();
            let top = swap_delta_ap(&list, 0, 2).unwrap();
            let bottom = swap_delta_ap(&list, n - 2, n - 1).unwrap();
            let after = average_precision(&list.with_swapped(0, 2).unwrap()).value();
            prop_assert!(after > before);
            prop_assert!(top > bottom);
        }

        #[test]
        fn pr_curve_recall_is_monotone(flags in prop::collection::vec(any::<bool>(), 1..100)) {
            let list = RankList::from_relevance(flags);
            if let Ok(curve) = pr_curve(&list) {
                for w in curve.points.windows(2) {
                    prop_assert!(w[0].recall <= w[1].recall);
                }
                prop_assert!(curve.points.iter().all(|p| (0.0..=1.0).contains(&p.recall) && (0.0..=1.0).contains(&p.precision)));
                prop_assert_eq!(curve.points.last().unwrap().recall, 1.0);
            }
        }

        #[test]
        fn rank_list_matches_full_sort(bits in prop::collection::vec(prop::collection::vec(any::<bool>(), 12), 2..50), q in 0usize..50) {
            let codes: Vec<PackedCode> = bits.iter().map(|b| PackedCode::from_bits(b)).collect();
            let q = q % codes.len();
            let list = build_rank_list(q, &codes, |a, b| (a + b) % 3 == 0).unwrap();
            let mut oracle: Vec<(u32, usize)> = (0..codes.len())
                .filter(|&i| i != q)
                .map(|i| (codes[q].hamming_unchecked(&codes[i]), i))
                .collect();
            oracle.sort();
            let expected: Vec<usize> = oracle.iter().map(|&(_, i)| i).collect();
            prop_assert_eq!(list.order(), expected.as_slice());
            prop_assert!(list.distances().windows(2).all(|w| w[0] <= w[1]));
            let expected_rel = list.order().iter().filter(|&&i| (q + i).is_multiple_of(3)).count();
            prop_assert_eq!(list.num_relevant(), expected_rel);
        }
    }
}
