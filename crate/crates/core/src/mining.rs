//! Triplet generation with order-aware weights, plus the hard-negative and
//! semi-hard selection baselines.
//!
//! Every mining routine returns its triplets sorted deterministically, and
//! all randomness comes from per-query ChaCha streams derived from the
//! caller's seed, so results do not depend on how queries are scheduled.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::codes::PackedCode;
use crate::data::LabelSet;
use crate::error::{Error, Result};
use crate::ranking::{build_rank_list, swap_delta_ap};

/// Default number of (relevant, irrelevant) pairs sampled per query.
pub const DEFAULT_CAP_PER_QUERY: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Triplet {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
}

impl Triplet {
    pub fn new(anchor: usize, positive: usize, negative: usize) -> Self {
        Self {
            anchor,
            positive,
            negative,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightedTriplet {
    pub triplet: Triplet,
    /// Order-aware weight: |ΔAP| from swapping positive and negative in the
    /// anchor's rank list.
    pub weight: f64,
    /// Raw hinge loss, filled in once codes are scored.
    pub loss: f64,
}

impl WeightedTriplet {
    pub fn unweighted(triplet: Triplet) -> Self {
        Self {
            triplet,
            weight: 1.0,
            loss: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MiningStats {
    pub triplets: usize,
    pub zero_weight: usize,
    pub fallbacks: usize,
    /// Queries that produced no triplet (no relevant or no irrelevant item).
    pub empty_queries: usize,
}

impl MiningStats {
    pub fn merge(&mut self, other: &MiningStats) {
        self.triplets += other.triplets;
        self.zero_weight += other.zero_weight;
        self.fallbacks += other.fallbacks;
        self.empty_queries += other.empty_queries;
    }
}

fn query_rng(seed: u64, query: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(query as u64);
    rng
}

fn check_batch(codes: &[PackedCode], labels: &[LabelSet]) -> Result<()> {
    if codes.len() != labels.len() {
        return Err(Error::Dimension {
            expected: codes.len(),
            actual: labels.len(),
        });
    }
    if codes.len() < 3 {
        return Err(Error::DegenerateBatch(format!(
            "triplet mining needs at least 3 items, got {}",
            codes.len()
        )));
    }
    Ok(())
}

/// Builds the rank list of every item against the rest of the batch, forms
/// (relevant, irrelevant) pairs for it, and weights each resulting triplet
/// by the swap delta of its two positions.
///
/// With `cap_per_query = Some(c)`, at most `c` pairs per query are drawn
/// uniformly without replacement.
pub fn generate_triplets(
    codes: &[PackedCode],
    labels: &[LabelSet],
    cap_per_query: Option<usize>,
    seed: u64,
) -> Result<(Vec<WeightedTriplet>, MiningStats)> {
    check_batch(codes, labels)?;
    let relevant = |a: usize, b: usize| labels[a].intersects(&labels[b]);
    let per_query: Vec<Vec<WeightedTriplet>> = (0..codes.len())
        .into_par_iter()
        .map(|q| {
            let rl = build_rank_list(q, codes, relevant)?;
            let (pos, neg): (Vec<usize>, Vec<usize>) =
                (0..rl.len()).partition(|&p| rl.relevance()[p]);
            let total = pos.len() * neg.len();
            let pairs: Vec<usize> = match cap_per_query {
                Some(cap) if cap < total => {
                    let mut picked = index::sample(&mut query_rng(seed, q), total, cap).into_vec();
                    picked.sort_unstable();
                    picked
                }
                _ => (0..total).collect(),
            };
            pairs
                .into_iter()
                .map(|k| {
                    let (pp, pn) = (pos[k / neg.len()], neg[k % neg.len()]);
                    Ok(WeightedTriplet {
                        triplet: Triplet::new(q, rl.order()[pp], rl.order()[pn]),
                        weight: swap_delta_ap(&rl, pp, pn)?,
                        loss: 0.0,
                    })
                })
                .collect()
        })
        .collect::<Result<_>>()?;

    let mut stats = MiningStats {
        empty_queries: per_query.iter().filter(|t| t.is_empty()).count(),
        ..Default::default()
    };
    let mut triplets: Vec<WeightedTriplet> = per_query.into_iter().flatten().collect();
    triplets.sort_unstable_by_key(|t| t.triplet);
    stats.triplets = triplets.len();
    stats.zero_weight = triplets.iter().filter(|t| t.weight == 0.0).count();
    Ok((triplets, stats))
}

/// Keeps the `top_n` highest-loss triplets of every (anchor, positive)
/// group, ties broken by ascending negative index. The returned triplets
/// carry their losses and are ordered by group, then descending loss.
pub fn mine_hard_negatives(
    triplets: &[WeightedTriplet],
    losses: &[f64],
    top_n: usize,
) -> Result<Vec<WeightedTriplet>> {
    if triplets.len() != losses.len() {
        return Err(Error::Dimension {
            expected: triplets.len(),
            actual: losses.len(),
        });
    }
    if top_n == 0 {
        return Err(Error::Config("top_n must be at least 1".into()));
    }
    let mut scored: Vec<WeightedTriplet> = triplets
        .iter()
        .zip(losses)
        .map(|(t, &loss)| WeightedTriplet { loss, ..*t })
        .collect();
    scored.sort_by(|x, y| {
        let (a, b) = (x.triplet, y.triplet);
        (a.anchor, a.positive)
            .cmp(&(b.anchor, b.positive))
            .then(y.loss.total_cmp(&x.loss))
            .then(a.negative.cmp(&b.negative))
    });
    let mut kept = Vec::new();
    let mut group = None;
    let mut taken = 0;
    for t in scored {
        let key = (t.triplet.anchor, t.triplet.positive);
        if group != Some(key) {
            group = Some(key);
            taken = 0;
        }
        if taken < top_n {
            kept.push(t);
            taken += 1;
        }
    }
    Ok(kept)
}

/// For every anchor-positive pair, draws one negative uniformly among those
/// strictly farther (Hamming) from the anchor than the positive. When none
/// qualifies the farthest negative is used instead and counted in
/// `fallbacks`.
pub fn mine_semi_hard(
    codes: &[PackedCode],
    labels: &[LabelSet],
    seed: u64,
) -> Result<(Vec<Triplet>, MiningStats)> {
    check_batch(codes, labels)?;
    let bits = codes[0].bit_len();
    if let Some(c) = codes.iter().find(|c| c.bit_len() != bits) {
        return Err(Error::Dimension {
            expected: bits,
            actual: c.bit_len(),
        });
    }
    let per_anchor: Vec<(Vec<Triplet>, usize)> = (0..codes.len())
        .into_par_iter()
        .map(|a| {
            let mut rng = query_rng(seed, a);
            let dist: Vec<u32> = codes.iter().map(|c| codes[a].hamming_unchecked(c)).collect();
            let (pos, neg): (Vec<usize>, Vec<usize>) = (0..codes.len())
                .filter(|&i| i != a)
                .partition(|&i| labels[a].intersects(&labels[i]));
            let mut out = Vec::new();
            let mut fallbacks = 0;
            if neg.is_empty() {
                return (out, 0);
            }
            for &p in &pos {
                let farther: Vec<usize> = neg.iter().copied().filter(|&n| dist[n] > dist[p]).collect();
                let n = if farther.is_empty() {
                    fallbacks += 1;
                    // max distance, smallest index on ties
                    *neg.iter().rev().max_by_key(|&&n| dist[n]).unwrap()
                } else {
                    farther[rng.random_range(0..farther.len())]
                };
                out.push(Triplet::new(a, p, n));
            }
            (out, fallbacks)
        })
        .collect();
    let mut stats = MiningStats::default();
    let mut triplets = Vec::new();
    for (t, f) in per_anchor {
        if t.is_empty() {
            stats.empty_queries += 1;
        }
        stats.fallbacks += f;
        triplets.extend(t);
    }
    stats.triplets = triplets.len();
    Ok((triplets, stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ranking::RankList;
    use proptest::prelude::*;

    fn labels(ls: &[u32]) -> Vec<LabelSet> {
        ls.iter().map(|&l| LabelSet::single(l)).collect()
    }

    fn random_codes(n: usize, bits: usize, seed: u64) -> Vec<PackedCode> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| PackedCode::from_bits(&(0..bits).map(|_| rng.random::<bool>()).collect::<Vec<_>>()))
            .collect()
    }

    #[test]
    fn three_item_batch() {
        let codes = random_codes(3, 8, 1);
        let (t, stats) = generate_triplets(&codes, &labels(&[0, 0, 1]), None, 0).unwrap();
        let from_query0: Vec<Triplet> = t.iter().map(|w| w.triplet).filter(|t| t.anchor == 0).collect();
        assert_eq!(from_query0, vec![Triplet::new(0, 1, 2)]);
        // query 2 has no relevant item
        assert_eq!(stats.empty_queries, 1);
        assert_eq!(stats.triplets, 2);
    }

    #[test]
    fn degenerate_inputs() {
        let codes = random_codes(2, 8, 1);
        assert!(generate_triplets(&codes, &labels(&[0, 1]), None, 0).is_err());
        let codes = random_codes(4, 8, 1);
        let (t, stats) = generate_triplets(&codes, &labels(&[0, 0, 0, 0]), None, 0).unwrap();
        assert!(t.is_empty());
        assert_eq!(stats.empty_queries, 4);
    }

    #[test]
    fn adjacent_pair_weight_delegates_to_swap_delta() {
        // anchor 0 at all-zero; positive one bit away, negative two bits away
        let codes = vec![
            PackedCode::from_bits(&[false, false, false, false]),
            PackedCode::from_bits(&[true, true, false, false]),
            PackedCode::from_bits(&[true, false, false, false]),
            PackedCode::from_bits(&[true, true, true, true]),
        ];
        let ls = labels(&[0, 1, 0, 1]);
        let (t, _) = generate_triplets(&codes, &ls, None, 0).unwrap();
        let w = t.iter().find(|w| w.triplet == Triplet::new(0, 2, 1)).unwrap();
        // rank list of 0: [2 (rel), 1, 3]
        let rl = RankList::from_relevance(vec![true, false, false]);
        assert_eq!(w.weight, swap_delta_ap(&rl, 0, 1).unwrap());
    }

    #[test]
    fn uncapped_count_matches_combinatorics() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let ls: Vec<u32> = (0..32).map(|_| rng.random_range(0..5)).collect();
        let ls = labels(&ls);
        let codes = random_codes(32, 16, 2);
        let (t, _) = generate_triplets(&codes, &ls, None, 0).unwrap();
        let expected: usize = (0..32)
            .map(|i| {
                let r = (0..32).filter(|&j| j != i && ls[i].intersects(&ls[j])).count();
                r * (31 - r)
            })
            .sum();
        assert_eq!(t.len(), expected);
        assert!(t.windows(2).all(|w| w[0].triplet < w[1].triplet));
    }

    #[test]
    fn capped_mode_samples_without_replacement() {
        let codes = random_codes(40, 16, 5);
        let ls = labels(&(0..40).map(|i| i % 4).collect::<Vec<_>>());
        let (t, _) = generate_triplets(&codes, &ls, Some(7), 3).unwrap();
        for q in 0..40 {
            let mine: Vec<_> = t.iter().filter(|w| w.triplet.anchor == q).collect();
            assert_eq!(mine.len(), 7);
            let mut uniq: Vec<_> = mine.iter().map(|w| w.triplet).collect();
            uniq.dedup();
            assert_eq!(uniq.len(), 7);
        }
        let (again, _) = generate_triplets(&codes, &ls, Some(7), 3).unwrap();
        assert_eq!(t, again);
        let (other, _) = generate_triplets(&codes, &ls, Some(7), 4).unwrap();
        assert_ne!(t, other);
    }

    #[test]
    fn hard_negative_top_n() {
        let t: Vec<WeightedTriplet> = (0..5)
            .map(|n| WeightedTriplet::unweighted(Triplet::new(0, 1, n + 2)))
            .collect();
        let kept = mine_hard_negatives(&t, &[1.0, 1.0, 5.0, 1.0, 1.0], 4).unwrap();
        let losses: Vec<f64> = kept.iter().map(|w| w.loss).collect();
        assert_eq!(losses, vec![5.0, 1.0, 1.0, 1.0]);
        let negs: Vec<usize> = kept.iter().map(|w| w.triplet.negative).collect();
        assert_eq!(negs, vec![4, 2, 3, 5]);

        let one = mine_hard_negatives(&t, &[0.0, 3.0, 2.0, 3.0, 1.0], 1).unwrap();
        assert_eq!(one.len(), 1);
        assert_eq!(one[0].triplet.negative, 3);

        assert!(mine_hard_negatives(&t, &[1.0], 4).is_err());
        assert!(mine_hard_negatives(&t, &[1.0; 5], 0).is_err());
    }

    #[test]
    fn hard_negative_matches_sort_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let t: Vec<WeightedTriplet> = (0..100)
            .map(|k| {
                WeightedTriplet::unweighted(Triplet::new(rng.random_range(0..3), rng.random_range(3..6), 6 + k))
            })
            .collect();
        let losses: Vec<f64> = (0..100).map(|_| (rng.random_range(0..10) as f64) / 2.0).collect();
        let kept = mine_hard_negatives(&t, &losses, 4).unwrap();
        for a in 0..3 {
            for p in 3..6 {
                let mut group: Vec<(f64, usize)> = t
                    .iter()
                    .zip(&losses)
                    .filter(|(w, _)| w.triplet.anchor == a && w.triplet.positive == p)
                    .map(|(w, &l)| (l, w.triplet.negative))
                    .collect();
                group.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)));
                group.truncate(4);
                let got: Vec<(f64, usize)> = kept
                    .iter()
                    .filter(|w| w.triplet.anchor == a && w.triplet.positive == p)
                    .map(|w| (w.loss, w.triplet.negative))
                    .collect();
                assert_eq!(got, group);
            }
        }
    }

    #[test]
    fn semi_hard_picks_the_farther_negative() {
        // anchor 0 at 0000, positive 1 at distance 1, negatives at 0 and 3
        let codes = vec![
            PackedCode::from_bits(&[false; 4]),
            PackedCode::from_bits(&[true, false, false, false]),
            PackedCode::from_bits(&[false; 4]),
            PackedCode::from_bits(&[true, true, true, false]),
        ];
        let ls = labels(&[0, 0, 1, 1]);
        let (t, _) = mine_semi_hard(&codes, &ls, 0).unwrap();
        assert!(t.contains(&Triplet::new(0, 1, 3)));
        assert!(!t.contains(&Triplet::new(0, 1, 2)));
    }

    #[test]
    fn semi_hard_falls_back_to_farthest() {
        let codes = vec![
            PackedCode::from_bits(&[false; 4]),
            PackedCode::from_bits(&[true, true, true, true]),
            PackedCode::from_bits(&[true, false, false, false]),
            PackedCode::from_bits(&[true, true, false, false]),
        ];
        let ls = labels(&[0, 0, 1, 1]);
        let (t, stats) = mine_semi_hard(&codes, &ls, 0).unwrap();
        assert!(t.contains(&Triplet::new(0, 1, 3)));
        assert!(stats.fallbacks >= 1);
    }

    #[test]
    fn semi_hard_post_condition_on_random_batch() {
        let codes = random_codes(20, 12, 8);
        let ls = labels(&(0..20).map(|i| i % 3).collect::<Vec<_>>());
        let (t, stats) = mine_semi_hard(&codes, &ls, 5).unwrap();
        let d = |a: usize, b: usize| codes[a].hamming_unchecked(&codes[b]);
        let mut violations = 0;
        for tr in &t {
            assert!(ls[tr.anchor].intersects(&ls[tr.positive]));
            assert!(!ls[tr.anchor].intersects(&ls[tr.negative]));
            if d(tr.anchor, tr.negative) <= d(tr.anchor, tr.positive) {
                violations += 1;
                let max = (0..20)
                    .filter(|&n| !ls[tr.anchor].intersects(&ls[n]))
                    .map(|n| d(tr.anchor, n))
                    .max()
                    .unwrap();
                assert_eq!(d(tr.anchor, tr.negative), max);
            }
        }
        assert_eq!(violations, stats.fallbacks);
        // every anchor-positive pair used once
        let pairs: usize = (0..20)
            .map(|a| (0..20).filter(|&p| p != a && ls[a].intersects(&ls[p])).count())
            .sum();
        assert_eq!(t.len(), pairs);
        assert_eq!(mine_semi_hard(&codes, &ls, 5).unwrap().0, t);
    }

    proptest! {
        #[test]
        fn weights_equal_swap_delta_on_rank_list(seed in any::<u64>(), n in 3usize..25) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let codes = random_codes(n, 10, seed);
            let ls = labels(&(0..n).map(|_| rng.random_range(0..3)).collect::<Vec<_>>());
            let (t, stats) = generate_triplets(&codes, &ls, None, seed).unwrap();
            let expected: usize = (0..n).map(|i| {
                let r = (0..n).filter(|&j| j != i && ls[i].intersects(&ls[j])).count();
                r * (n - 1 - r)
            }).sum();
            prop_assert_eq!(t.len(), expected);
            for w in &t {
                let rl = build_rank_list(w.triplet.anchor, &codes, |a, b| ls[a].intersects(&ls[b])).unwrap();
                let pp = rl.order().iter().position(|&i| i == w.triplet.positive).unwrap();
                let pn = rl.order().iter().position(|&i| i == w.triplet.negative).unwrap();
                prop_assert_eq!(w.weight, swap_delta_ap(&rl, pp, pn).unwrap());
                // positive and negative always differ in relevance, so the swap moves AP
                prop_assert!(w.weight > 0.0);
            }
            prop_assert_eq!(stats.zero_weight, 0);
        }
    }
}
