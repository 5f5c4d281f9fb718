//! Triplet hinge loss on relaxed codes, its power reshaping, and the
//! weighted batch objective with analytic gradients.
//!
//! For a triplet (i, j, k) with margin ε:
//!
//! ```text
//! ℓ = max(0, ε - |h_i - h_k|² + |h_i - h_j|²)
//! objective = Σ λ · ℓ^γ
//! ```
//!
//! λ is the order-aware weight from mining (or 1) and is held constant when
//! differentiating.

use ndarray::{Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mining::WeightedTriplet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    None,
    #[default]
    OrderAware,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub margin: f64,
    pub gamma: u32,
    pub weighting: Weighting,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            margin: 1.0,
            gamma: 2,
            weighting: Weighting::OrderAware,
        }
    }
}

impl LossConfig {
    pub fn plain() -> Self {
        Self {
            gamma: 1,
            weighting: Weighting::None,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.margin.is_finite() && self.margin > 0.0) {
            return Err(Error::Config(format!("margin {} must be finite and positive", self.margin)));
        }
        if self.gamma == 0 {
            return Err(Error::Config("gamma must be at least 1".into()));
        }
        Ok(())
    }
}

fn sq_dist(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Margin violation before the hinge: `ε - d²(i,k) + d²(i,j)`.
fn violation(h_i: ArrayView1<'_, f64>, h_j: ArrayView1<'_, f64>, h_k: ArrayView1<'_, f64>, margin: f64) -> f64 {
    margin - sq_dist(h_i, h_k) + sq_dist(h_i, h_j)
}

pub fn triplet_loss(h_i: &[f64], h_j: &[f64], h_k: &[f64], margin: f64) -> Result<f64> {
    for h in [h_j, h_k] {
        if h.len() != h_i.len() {
            return Err(Error::Dimension {
                expected: h_i.len(),
                actual: h.len(),
            });
        }
    }
    if margin.is_nan() || margin <= 0.0 {
        return Err(Error::InvalidInput(format!("margin {margin} must be positive")));
    }
    let v = violation(h_i.into(), h_j.into(), h_k.into(), margin);
    Ok(v.max(0.0))
}

#[inline]
pub fn powered_loss(l: f64, gamma: u32) -> f64 {
    l.powi(gamma as i32)
}

#[derive(Debug, Clone)]
pub struct Objective {
    pub total: f64,
    /// d objective / d code, one row per batch item.
    pub grads: Array2<f64>,
    /// Raw hinge loss of each triplet, in input order.
    pub losses: Vec<f64>,
}

impl Objective {
    /// Fraction of triplets with a positive hinge loss.
    pub fn active_ratio(&self) -> f64 {
        if self.losses.is_empty() {
            return 0.0;
        }
        self.losses.iter().filter(|&&l| l > 0.0).count() as f64 / self.losses.len() as f64
    }
}

fn check_indices(codes: &ArrayView2<'_, f64>, t: &WeightedTriplet) -> Result<()> {
    let n = codes.nrows();
    for idx in [t.triplet.anchor, t.triplet.positive, t.triplet.negative] {
        if idx >= n {
            return Err(Error::Index { index: idx, len: n });
        }
    }
    Ok(())
}

/// Raw hinge losses for every triplet, in order.
pub fn triplet_losses(codes: ArrayView2<'_, f64>, triplets: &[WeightedTriplet], margin: f64) -> Result<Vec<f64>> {
    triplets
        .iter()
        .map(|t| {
            check_indices(&codes, t)?;
            let tr = t.triplet;
            Ok(violation(codes.row(tr.anchor), codes.row(tr.positive), codes.row(tr.negative), margin).max(0.0))
        })
        .collect()
}

/// `Σ λ ℓ^γ` over the triplets and its gradient w.r.t. every code.
///
/// Per active triplet with scale `s = λ γ ℓ^(γ-1)`:
/// `∂/∂h_i = 2s(h_k - h_j)`, `∂/∂h_j = 2s(h_j - h_i)`, `∂/∂h_k = 2s(h_i - h_k)`.
/// Inactive triplets (ℓ = 0, including the hinge boundary) contribute
/// nothing. Accumulation follows triplet order.
pub fn batch_objective(codes: ArrayView2<'_, f64>, triplets: &[WeightedTriplet], cfg: &LossConfig) -> Result<Objective> {
    cfg.validate()?;
    let mut grads = Array2::zeros(codes.raw_dim());
    let mut losses = Vec::with_capacity(triplets.len());
    let mut total = 0.0;
    for (n, t) in triplets.iter().enumerate() {
        check_indices(&codes, t)?;
        let tr = t.triplet;
        let (h_i, h_j, h_k) = (codes.row(tr.anchor), codes.row(tr.positive), codes.row(tr.negative));
        let l = violation(h_i, h_j, h_k, cfg.margin).max(0.0);
        let weight = match cfg.weighting {
            Weighting::None => 1.0,
            Weighting::OrderAware => t.weight,
        };
        let term = weight * powered_loss(l, cfg.gamma);
        if !term.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite loss {term} at triplet #{n} ({}, {}, {})",
                tr.anchor, tr.positive, tr.negative
            )));
        }
        losses.push(l);
        total += term;
        if l <= 0.0 || weight == 0.0 {
            continue;
        }
        let scale = 2.0 * weight * cfg.gamma as f64 * powered_loss(l, cfg.gamma - 1);
        for b in 0..codes.ncols() {
            let (i, j, k) = (h_i[b], h_j[b], h_k[b]);
            grads[[tr.anchor, b]] += scale * (k - j);
            grads[[tr.positive, b]] += scale * (j - i);
            grads[[tr.negative, b]] += scale * (i - k);
        }
    }
    Ok(Objective { total, grads, losses })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mining::Triplet;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn wt(a: usize, p: usize, n: usize, w: f64) -> WeightedTriplet {
        WeightedTriplet {
            triplet: Triplet::new(a, p, n),
            weight: w,
            loss: 0.0,
        }
    }

    #[test]
    fn hinge_examples() {
        // d²(i,j) = 0.2, d²(i,k) = 0.5
        let h_i = [0.0, 0.0];
        let h_j = [0.2f64.sqrt(), 0.0];
        let h_k = [0.0, 0.5f64.sqrt()];
        assert!((triplet_loss(&h_i, &h_j, &h_k, 1.0).unwrap() - 0.7).abs() < 1e-12);
        assert_eq!(triplet_loss(&[0.3, 0.1], &[0.9, 0.2], &[0.9, 0.2], 1.0).unwrap(), 1.0);
        assert_eq!(triplet_loss(&[0.0, 0.0], &[0.0, 0.0], &[1.0, 1.0], 1.0).unwrap(), 0.0);
        assert!(triplet_loss(&[0.0], &[0.0, 1.0], &[1.0], 1.0).is_err());
    }

    #[test]
    fn powered_examples() {
        assert_eq!(powered_loss(5.0, 2), 25.0);
        assert_eq!(powered_loss(1.0, 2), 1.0);
        assert_eq!(powered_loss(0.37, 1), 0.37);
        assert!((powered_loss(0.5, 2) - 0.25).abs() < 1e-15);
        assert!((powered_loss(0.1, 2) - 0.01).abs() < 1e-15);
    }

    #[test]
    fn squaring_lets_the_hard_triplet_dominate() {
        let losses = [5.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0];
        let share = |g: u32| {
            let total: f64 = losses.iter().map(|&l| powered_loss(l, g)).sum();
            (total, powered_loss(5.0, g) / total)
        };
        assert_eq!(share(1), (14.0, 5.0 / 14.0));
        assert_eq!(share(2), (34.0, 25.0 / 34.0));
        assert!(share(2).1 > 0.7 && share(1).1 < 0.36);
        // same picture below one
        let small: f64 = 0.25 / (0.25 + 9.0 * 0.01);
        assert!(small > 0.5);
    }

    #[test]
    fn inactive_triplet_has_no_gradient() {
        let codes = array![[0.0, 0.0], [0.0, 0.0], [1.0, 1.0]];
        let obj = batch_objective(codes.view(), &[wt(0, 1, 2, 1.0)], &LossConfig::plain()).unwrap();
        assert_eq!(obj.total, 0.0);
        assert!(obj.grads.iter().all(|&g| g == 0.0));
        assert_eq!(obj.active_ratio(), 0.0);
    }

    #[test]
    fn single_active_triplet_gradient_by_hand() {
        let codes = array![[0.1, 0.9], [0.6, 0.4], [0.2, 0.7], [0.5, 0.5]];
        let obj = batch_objective(codes.view(), &[wt(0, 1, 2, 0.3)], &LossConfig::plain()).unwrap();
        // ℓ = 1 - (0.01 + 0.04) + (0.25 + 0.25) = 1.45
        assert!((obj.total - 1.45).abs() < 1e-12);
        let expect = array![
            [2.0 * (0.2 - 0.6), 2.0 * (0.7 - 0.4)],
            [2.0 * (0.6 - 0.1), 2.0 * (0.4 - 0.9)],
            [2.0 * (0.1 - 0.2), 2.0 * (0.9 - 0.7)],
            [0.0, 0.0]
        ];
        for (g, e) in obj.grads.iter().zip(expect.iter()) {
            assert!((g - e).abs() < 1e-12);
        }
    }

    #[test]
    fn weighting_scales_terms() {
        let codes = array![[0.1, 0.9], [0.6, 0.4], [0.2, 0.7]];
        let t = [wt(0, 1, 2, 0.25)];
        let cfg = LossConfig {
            gamma: 2,
            ..LossConfig::default()
        };
        let obj = batch_objective(codes.view(), &t, &cfg).unwrap();
        assert!((obj.total - 0.25 * 1.45f64.powi(2)).abs() < 1e-12);
        let unw = batch_objective(codes.view(), &t, &LossConfig { weighting: Weighting::None, ..cfg }).unwrap();
        assert!((unw.total - 1.45f64.powi(2)).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_indices_and_configs() {
        let codes = array![[0.1], [0.2]];
        assert!(matches!(
            batch_objective(codes.view(), &[wt(0, 1, 2, 1.0)], &LossConfig::plain()),
            Err(Error::Index { index: 2, .. })
        ));
        let bad = LossConfig { gamma: 0, ..LossConfig::plain() };
        assert!(batch_objective(codes.view(), &[], &bad).is_err());
        let bad = LossConfig { margin: -1.0, ..LossConfig::plain() };
        assert!(batch_objective(codes.view(), &[], &bad).is_err());
    }

    #[test]
    fn non_finite_loss_is_reported() {
        let codes = array![[0.1], [1e300], [0.0]];
        let err = batch_objective(codes.view(), &[wt(0, 1, 2, 1.0)], &LossConfig::default()).unwrap_err();
        assert!(err.is_numeric());
        assert!(err.to_string().contains("(0, 1, 2)"));
    }

    fn random_setup(seed: u64, r: usize, q: usize) -> (Array2<f64>, Vec<WeightedTriplet>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let codes = Array2::from_shape_fn((r, q), |_| rng.random::<f64>());
        let triplets = (0..3 * r)
            .map(|_| {
                let mut idx = rand::seq::index::sample(&mut rng, r, 3).into_vec();
                idx.truncate(3);
                wt(idx[0], idx[1], idx[2], rng.random::<f64>())
            })
            .collect();
        (codes, triplets)
    }

    #[test]
    fn gradient_matches_central_differences() {
        let h = 1e-5;
        for seed in 0..30u64 {
            for gamma in 1..=3 {
                for weighting in [Weighting::None, Weighting::OrderAware] {
                    let q = [2, 5, 16][seed as usize % 3];
                    let (codes, triplets) = random_setup(seed, 8, q);
                    let cfg = LossConfig { margin: 0.5, gamma, weighting };
                    let viol: Vec<f64> = triplets
                        .iter()
                        .map(|t| {
                            let tr = t.triplet;
                            violation(codes.row(tr.anchor), codes.row(tr.positive), codes.row(tr.negative), cfg.margin)
                        })
                        .collect();
                    if viol.iter().any(|v| v.abs() < 1e-3) {
                        continue;
                    }
                    let obj = batch_objective(codes.view(), &triplets, &cfg).unwrap();
                    let mut fd = Array2::zeros(codes.raw_dim());
                    for idx in ndarray::indices_of(&codes) {
                        let mut plus = codes.clone();
                        plus[idx] += h;
                        let mut minus = codes.clone();
                        minus[idx] -= h;
                        let fp = batch_objective(plus.view(), &triplets, &cfg).unwrap().total;
                        let fm = batch_objective(minus.view(), &triplets, &cfg).unwrap().total;
                        fd[idx] = (fp - fm) / (2.0 * h);
                    }
                    let scale = fd.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
                    let err = (&obj.grads - &fd).iter().fold(0.0f64, |m, v| m.max(v.abs())) / scale;
                    assert!(err < 1e-4, "seed {seed} gamma {gamma}: rel err {err}");
                }
            }
        }
    }

    proptest! {
        #[test]
        fn objective_is_nonnegative_and_zero_iff_satisfied(seed in any::<u64>(), gamma in 1u32..4) {
            let (codes, triplets) = random_setup(seed, 6, 4);
            let cfg = LossConfig { margin: 0.3, gamma, weighting: Weighting::None };
            let obj = batch_objective(codes.view(), &triplets, &cfg).unwrap();
            prop_assert!(obj.total >= 0.0);
            let all_satisfied = triplets.iter().all(|t| {
                let tr = t.triplet;
                sq_dist(codes.row(tr.anchor), codes.row(tr.negative))
                    >= cfg.margin + sq_dist(codes.row(tr.anchor), codes.row(tr.positive))
            });
            prop_assert_eq!(obj.total == 0.0, all_satisfied);
        }

        #[test]
        fn moving_negative_away_never_increases_loss(
            anchor in prop::collection::vec(0.0f64..1.0, 4),
            pos in prop::collection::vec(0.0f64..1.0, 4),
            neg in prop::collection::vec(0.0f64..1.0, 4),
            step in 0.0f64..2.0,
            margin in 0.1f64..2.0,
        ) {
            let base = triplet_loss(&anchor, &pos, &neg, margin).unwrap();
            // push the negative (and separately the positive) along the anchor ray
            let away = |x: &[f64]| -> Vec<f64> { x.iter().zip(&anchor).map(|(v, a)| v + step * (v - a)).collect() };
            prop_assert!(triplet_loss(&anchor, &pos, &away(&neg), margin).unwrap() <= base + 1e-12);
            prop_assert!(triplet_loss(&anchor, &away(&pos), &neg, margin).unwrap() >= base - 1e-12);
        }
    }
}
