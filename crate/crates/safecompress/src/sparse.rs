//! Sparsity masks: Erdős–Rényi initialization, the 2x2 prune/grow
//! strategy grid, and the schedule for how hard each update prunes.
//!
//! The global invariant owned here: active count / total count never
//! exceeds the target sparsity, and dynamic updates conserve the active
//! count exactly.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PruneKind {
    Magnitude,
    Threshold,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GrowKind {
    Gradient,
    Random,
}

/// One cell of the 2x2 prune/grow grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct UpdateStrategy {
    pub prune: PruneKind,
    pub grow: GrowKind,
}

impl UpdateStrategy {
    /// All four strategies, in the fixed enumeration order used for
    /// tie-breaking during selection.
    pub fn all() -> [UpdateStrategy; 4] {
        [
            UpdateStrategy {
                prune: PruneKind::Magnitude,
                grow: GrowKind::Gradient,
            },
            UpdateStrategy {
                prune: PruneKind::Magnitude,
                grow: GrowKind::Random,
            },
            UpdateStrategy {
                prune: PruneKind::Threshold,
                grow: GrowKind::Gradient,
            },
            UpdateStrategy {
                prune: PruneKind::Threshold,
                grow: GrowKind::Random,
            },
        ]
    }

    pub fn label(&self) -> String {
        format!(
            "{}+{}",
            match self.prune {
                PruneKind::Magnitude => "magnitude",
                PruneKind::Threshold => "threshold",
            },
            match self.grow {
                GrowKind::Gradient => "gradient",
                GrowKind::Random => "random",
            }
        )
    }

    pub fn from_label(label: &str) -> Option<UpdateStrategy> {
        let (p, g) = label.split_once('+')?;
        let prune = match p {
            "magnitude" => PruneKind::Magnitude,
            "threshold" => PruneKind::Threshold,
            _ => return None,
        };
        let grow = match g {
            "gradient" => GrowKind::Gradient,
            "random" => GrowKind::Random,
            _ => return None,
        };
        Some(UpdateStrategy { prune, grow })
    }
}

impl std::fmt::Display for UpdateStrategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.label())
    }
}

/// How the per-update prune fraction evolves over the run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PruneDecay {
    Constant,
    Cosine,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PruneSchedule {
    pub initial: f64,
    pub decay: PruneDecay,
}

impl Default for PruneSchedule {
    fn default() -> Self {
        PruneSchedule {
            initial: 0.3,
            decay: PruneDecay::Cosine,
        }
    }
}

impl PruneSchedule {
    pub fn fraction_at(&self, round: usize, total_rounds: usize) -> f64 {
        match self.decay {
            PruneDecay::Constant => self.initial,
            PruneDecay::Cosine => {
                let t = round as f64 / total_rounds.max(1) as f64;
                self.initial * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }
}

/// Per-position connection probability of the Erdős–Rényi scheme for a
/// layer with `n_prev` inputs and `n_cur` outputs.
pub fn er_layer_probability(n_prev: usize, n_cur: usize, eps: f64) -> f64 {
    (eps * (n_prev + n_cur) as f64 / (n_prev * n_cur) as f64).min(1.0)
}

/// Per-layer binary activation pattern over weight positions.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMask {
    shapes: Vec<(usize, usize)>,
    bits: Vec<Vec<bool>>,
    target_sparsity: f64,
}

impl SparseMask {
    /// Fully dense mask (every position active).
    pub fn dense(layer_dims: &[(usize, usize)]) -> Self {
        SparseMask {
            shapes: layer_dims.to_vec(),
            bits: layer_dims.iter().map(|&(a, b)| vec![true; a * b]).collect(),
            target_sparsity: 1.0,
        }
    }

    pub fn target_sparsity(&self) -> f64 {
        self.target_sparsity
    }

    pub fn set_target_sparsity(&mut self, omega: f64) {
        self.target_sparsity = omega;
    }

    pub fn layer_count(&self) -> usize {
        self.bits.len()
    }

    pub fn shapes(&self) -> &[(usize, usize)] {
        &self.shapes
    }

    pub fn layer(&self, k: usize) -> &[bool] {
        &self.bits[k]
    }

    pub fn layer_mut(&mut self, k: usize) -> &mut Vec<bool> {
        &mut self.bits[k]
    }

    pub fn layer_active(&self, k: usize) -> usize {
        self.bits[k].iter().filter(|b| **b).count()
    }

    pub fn active_count(&self) -> usize {
        self.bits
            .iter()
            .map(|l| l.iter().filter(|b| **b).count())
            .sum()
    }

    pub fn total_count(&self) -> usize {
        self.bits.iter().map(|l| l.len()).sum()
    }

    pub fn active_fraction(&self) -> f64 {
        self.active_count() as f64 / self.total_count() as f64
    }

    /// The largest active count the target sparsity admits.
    pub fn active_cap(&self) -> usize {
        active_cap(self.target_sparsity, self.total_count())
    }

    /// FNV-1a hash over shapes and bits; stable topology fingerprint.
    pub fn digest(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        let mut eat = |byte: u8| {
            h ^= byte as u64;
            h = h.wrapping_mul(0x100000001b3);
        };
        for (&(a, b), bits) in self.shapes.iter().zip(&self.bits) {
            for v in [a as u64, b as u64] {
                for byte in v.to_le_bytes() {
                    eat(byte);
                }
            }
            let mut acc = 0u8;
            for (i, &bit) in bits.iter().enumerate() {
                if bit {
                    acc |= 1 << (i % 8);
                }
                if i % 8 == 7 {
                    eat(acc);
                    acc = 0;
                }
            }
            if bits.len() % 8 != 0 {
                eat(acc);
            }
        }
        h
    }

    /// Deactivate the `k` active positions of layer `layer` with the
    /// smallest weight magnitudes, zeroing the pruned weights.
    pub fn magnitude_prune(&mut self, layer: usize, weights: &mut [f64], k: usize) -> Result<()> {
        let bits = &mut self.bits[layer];
        let active = bits.iter().filter(|b| **b).count();
        if k > active {
            return Err(Error::PruneCountExceedsActive { count: k, active });
        }
        let mut candidates: Vec<(f64, usize)> = bits
            .iter()
            .enumerate()
            .filter(|(_, b)| **b)
            .map(|(i, _)| (weights[i].abs(), i))
            .collect();
        candidates.sort_by(|a, b| a.partial_cmp(b).expect("finite weights"));
        for &(_, i) in candidates.iter().take(k) {
            bits[i] = false;
            weights[i] = 0.0;
        }
        Ok(())
    }

    /// Deactivate every active position of layer `layer` whose weight
    /// magnitude is strictly below `tau`. Returns how many were pruned.
    pub fn threshold_prune(&mut self, layer: usize, weights: &mut [f64], tau: f64) -> usize {
        self.threshold_prune_capped(layer, weights, tau, usize::MAX)
    }

    /// Threshold pruning bounded to at most `cap` removals; when over the
    /// cap, the smallest magnitudes go first.
    pub fn threshold_prune_capped(
        &mut self,
        layer: usize,
        weights: &mut [f64],
        tau: f64,
        cap: usize,
    ) -> usize {
        let bits = &mut self.bits[layer];
        let mut below: Vec<(f64, usize)> = bits
            .iter()
            .enumerate()
            .filter(|(i, b)| **b && weights[*i].abs() < tau)
            .map(|(i, _)| (weights[i].abs(), i))
            .collect();
        below.sort_by(|a, b| a.partial_cmp(b).expect("finite weights"));
        let count = below.len().min(cap);
        for &(_, i) in below.iter().take(count) {
            bits[i] = false;
            weights[i] = 0.0;
        }
        count
    }

    /// Activate the `g` inactive positions of layer `layer` with the
    /// largest dense-gradient magnitudes. New weights start at zero so the
    /// function is unchanged at the instant of growth.
    pub fn gradient_grow(
        &mut self,
        layer: usize,
        weights: &mut [f64],
        dense_grads: &[f64],
        g: usize,
    ) -> Result<()> {
        let bits = &mut self.bits[layer];
        let inactive = bits.iter().filter(|b| !**b).count();
        if g > inactive {
            return Err(Error::GrowCountExceedsInactive { count: g, inactive });
        }
        let mut candidates: Vec<(f64, usize)> = bits
            .iter()
            .enumerate()
            .filter(|(_, b)| !**b)
            .map(|(i, _)| (dense_grads[i].abs(), i))
            .collect();
        // Largest magnitude first; ties resolved by position for determinism.
        candidates.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .expect("finite gradients")
                .then(a.1.cmp(&b.1))
        });
        for &(_, i) in candidates.iter().take(g) {
            bits[i] = true;
            weights[i] = 0.0;
        }
        Ok(())
    }

    /// Activate `g` inactive positions of layer `layer` uniformly at
    /// random without replacement.
    pub fn random_grow(
        &mut self,
        layer: usize,
        weights: &mut [f64],
        g: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<()> {
        let bits = &mut self.bits[layer];
        let mut inactive: Vec<usize> = bits
            .iter()
            .enumerate()
            .filter(|(_, b)| !**b)
            .map(|(i, _)| i)
            .collect();
        if g > inactive.len() {
            return Err(Error::GrowCountExceedsInactive {
                count: g,
                inactive: inactive.len(),
            });
        }
        inactive.shuffle(rng);
        for &i in inactive.iter().take(g) {
            bits[i] = true;
            weights[i] = 0.0;
        }
        Ok(())
    }
}

fn active_cap(omega: f64, total: usize) -> usize {
    ((omega * total as f64) + 1e-9).floor() as usize
}

/// Erdős–Rényi sparse initialization: position (i,j) of layer k is active
/// with probability eps*(n_k + n_{k-1})/(n_k * n_{k-1}), with eps solved by
/// bisection so the expected global active fraction equals `omega`. The
/// realized draw is then trimmed, if needed, so the hard sparsity bound
/// holds exactly.
pub fn er_init(layer_dims: &[(usize, usize)], omega: f64, seed: u64) -> Result<SparseMask> {
    if !(omega > 0.0 && omega <= 1.0) {
        return Err(Error::InfeasibleOmega {
            omega,
            detail: "target sparsity must lie in (0, 1]".to_string(),
        });
    }
    if layer_dims.is_empty() || layer_dims.iter().any(|&(a, b)| a == 0 || b == 0) {
        return Err(Error::InfeasibleOmega {
            omega,
            detail: "every layer dimension must be at least 1".to_string(),
        });
    }

    let total: usize = layer_dims.iter().map(|&(a, b)| a * b).sum();
    let expected_fraction = |eps: f64| -> f64 {
        layer_dims
            .iter()
            .map(|&(a, b)| (a * b) as f64 * er_layer_probability(a, b, eps))
            .sum::<f64>()
            / total as f64
    };

    // All probabilities saturate at 1 for eps >= max(n*m/(n+m)).
    let eps_cap = layer_dims
        .iter()
        .map(|&(a, b)| (a * b) as f64 / (a + b) as f64)
        .fold(0.0, f64::max);
    let eps = if omega >= 1.0 {
        eps_cap
    } else {
        if expected_fraction(eps_cap) < omega - 1e-12 {
            return Err(Error::InfeasibleOmega {
                omega,
                detail: "no epsilon reaches the requested density".to_string(),
            });
        }
        let (mut lo, mut hi) = (0.0, eps_cap);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if expected_fraction(mid) < omega {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bits: Vec<Vec<bool>> = Vec::with_capacity(layer_dims.len());
    for &(a, b) in layer_dims {
        let p = er_layer_probability(a, b, eps);
        bits.push((0..a * b).map(|_| rng.random::<f64>() < p).collect());
    }

    let mut mask = SparseMask {
        shapes: layer_dims.to_vec(),
        bits,
        target_sparsity: omega,
    };

    // Sampling noise can overshoot; trim uniformly back to the cap.
    let cap = active_cap(omega, total);
    let overshoot = mask.active_count().saturating_sub(cap);
    if overshoot > 0 {
        let mut active: Vec<(usize, usize)> = Vec::new();
        for (k, layer) in mask.bits.iter().enumerate() {
            for (i, &bit) in layer.iter().enumerate() {
                if bit {
                    active.push((k, i));
                }
            }
        }
        active.shuffle(&mut rng);
        for &(k, i) in active.iter().take(overshoot) {
            mask.bits[k][i] = false;
        }
    }
    Ok(mask)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn er_probability_direct_substitution() {
        // 100x100 layer with eps = 5: 5 * 200 / 10000 = 0.1.
        assert!((er_layer_probability(100, 100, 5.0) - 0.1).abs() < 1e-15);
    }

    #[test]
    fn omega_one_activates_everything() {
        let mask = er_init(&[(4, 8), (8, 3)], 1.0, 3).unwrap();
        assert_eq!(mask.active_count(), mask.total_count());
        assert!((mask.active_fraction() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn realized_density_tracks_omega_over_many_draws() {
        let dims = [(10, 100), (100, 10)];
        let mut mean = 0.0;
        let draws = 1000;
        for seed in 0..draws {
            let mask = er_init(&dims, 0.1, seed).unwrap();
            mean += mask.active_fraction();
            assert!(mask.active_count() <= mask.active_cap());
        }
        mean /= draws as f64;
        assert!(
            (mean - 0.1).abs() < 0.02,
            "Monte-Carlo mean {mean} strays from 0.1"
        );
    }

    #[test]
    fn omega_outside_unit_interval_is_infeasible() {
        assert!(matches!(
            er_init(&[(4, 4)], 0.0, 1),
            Err(Error::InfeasibleOmega { .. })
        ));
        assert!(matches!(
            er_init(&[(4, 4)], 1.5, 1),
            Err(Error::InfeasibleOmega { .. })
        ));
    }

    #[test]
    fn magnitude_prune_keeps_largest() {
        let mut mask = SparseMask::dense(&[(1, 4)]);
        let mut w = vec![0.5, -0.01, 0.3, -0.7];
        mask.magnitude_prune(0, &mut w, 2).unwrap();
        assert_eq!(mask.layer(0), &[true, false, false, true]);
        assert_eq!(w, vec![0.5, 0.0, 0.0, -0.7]);
    }

    #[test]
    fn magnitude_prune_zero_is_identity() {
        let mut mask = SparseMask::dense(&[(1, 4)]);
        let before = mask.clone();
        let mut w = vec![0.5, -0.01, 0.3, -0.7];
        mask.magnitude_prune(0, &mut w, 0).unwrap();
        assert_eq!(mask, before);
    }

    #[test]
    fn magnitude_prune_matches_full_sort_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let n = 64;
        let w: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let k = 24;

        // Oracle: full sort of |w|, keep the n-k largest.
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| w[a].abs().partial_cmp(&w[b].abs()).unwrap());
        let mut survivors = vec![true; n];
        for &i in order.iter().take(k) {
            survivors[i] = false;
        }

        let mut mask = SparseMask::dense(&[(1, n)]);
        let mut wm = w.clone();
        mask.magnitude_prune(0, &mut wm, k).unwrap();
        assert_eq!(mask.layer(0), survivors.as_slice());
    }

    #[test]
    fn magnitude_prune_rejects_excess_count() {
        let mut mask = SparseMask::dense(&[(1, 3)]);
        let mut w = vec![1.0, 2.0, 3.0];
        assert!(matches!(
            mask.magnitude_prune(0, &mut w, 4),
            Err(Error::PruneCountExceedsActive {
                count: 4,
                active: 3
            })
        ));
    }

    #[test]
    fn threshold_prune_is_strict() {
        let mut mask = SparseMask::dense(&[(1, 4)]);
        let mut w = vec![0.5, -0.01, 0.3, -0.7];
        let pruned = mask.threshold_prune(0, &mut w, 0.2);
        assert_eq!(pruned, 1);
        assert_eq!(mask.layer(0), &[true, false, true, true]);

        // tau = 0 prunes nothing: comparison is strict.
        let mut mask = SparseMask::dense(&[(1, 3)]);
        let mut w = vec![0.0, 0.1, -0.2];
        assert_eq!(mask.threshold_prune(0, &mut w, 0.0), 0);
    }

    #[test]
    fn threshold_prune_matches_linear_scan_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = ChaCha8Rng::seed_from_u64(98);
        let n = 80;
        let w: Vec<f64> = (0..n).map(|_| rng.random_range(-0.5..0.5)).collect();
        let tau = 0.15;
        let expected: Vec<bool> = w.iter().map(|v| v.abs() >= tau).collect();

        let mut mask = SparseMask::dense(&[(1, n)]);
        let mut wm = w.clone();
        let pruned = mask.threshold_prune(0, &mut wm, tau);
        assert_eq!(mask.layer(0), expected.as_slice());
        assert_eq!(pruned, expected.iter().filter(|b| !**b).count());
    }

    #[test]
    fn gradient_grow_takes_largest_gradient() {
        let mut mask = SparseMask::dense(&[(1, 4)]);
        let mut w = vec![1.0, 0.0, 0.0, 1.0];
        mask.layer_mut(0)[1] = false;
        mask.layer_mut(0)[2] = false;
        let grads = vec![0.0, 0.1, 0.9, 0.0];
        mask.gradient_grow(0, &mut w, &grads, 1).unwrap();
        assert_eq!(mask.layer(0), &[true, false, true, true]);
        assert_eq!(w[2], 0.0, "grown weight starts at zero");
    }

    #[test]
    fn gradient_grow_matches_top_g_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = ChaCha8Rng::seed_from_u64(97);
        let n = 60;
        let mut mask = SparseMask::dense(&[(1, n)]);
        let mut w = vec![0.0; n];
        for i in 0..n {
            let active = rng.random::<f64>() < 0.4;
            mask.layer_mut(0)[i] = active;
            if active {
                w[i] = rng.random_range(0.1..1.0);
            }
        }
        let grads: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let g = 10;

        let mut inactive: Vec<usize> = (0..n).filter(|&i| !mask.layer(0)[i]).collect();
        inactive.sort_by(|&a, &b| grads[b].abs().partial_cmp(&grads[a].abs()).unwrap());
        let mut expected: Vec<bool> = mask.layer(0).to_vec();
        for &i in inactive.iter().take(g) {
            expected[i] = true;
        }

        mask.gradient_grow(0, &mut w, &grads, g).unwrap();
        assert_eq!(mask.layer(0), expected.as_slice());
    }

    #[test]
    fn random_grow_forced_and_full() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        // All but one inactive, g = 1: the one inactive slot must activate.
        let mut mask = SparseMask::dense(&[(1, 3)]);
        let mut w = vec![1.0, 1.0, 0.0];
        mask.layer_mut(0)[2] = false;
        mask.random_grow(0, &mut w, 1, &mut rng).unwrap();
        assert_eq!(mask.layer(0), &[true, true, true]);

        // g = inactive count regrows to fully dense.
        let mut mask = SparseMask::dense(&[(1, 5)]);
        let mut w = vec![0.0; 5];
        for i in 0..5 {
            mask.layer_mut(0)[i] = false;
        }
        mask.random_grow(0, &mut w, 5, &mut rng).unwrap();
        assert_eq!(mask.active_count(), 5);

        let mut empty_w: Vec<f64> = vec![0.0; 5];
        let mut full = SparseMask::dense(&[(1, 5)]);
        assert!(matches!(
            full.random_grow(0, &mut empty_w, 1, &mut rng),
            Err(Error::GrowCountExceedsInactive { .. })
        ));
    }

    #[test]
    fn random_grow_is_uniform_chi_square() {
        let slots = 20;
        let draws = 10_000;
        let mut counts = vec![0usize; slots];
        for seed in 0..draws {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut mask = SparseMask::dense(&[(1, slots)]);
            let mut w = vec![0.0; slots];
            for i in 0..slots {
                mask.layer_mut(0)[i] = false;
            }
            mask.random_grow(0, &mut w, 1, &mut rng).unwrap();
            let chosen = mask.layer(0).iter().position(|&b| b).unwrap();
            counts[chosen] += 1;
        }
        let expected = draws as f64 / slots as f64;
        let chi2: f64 = counts
            .iter()
            .map(|&c| {
                let d = c as f64 - expected;
                d * d / expected
            })
            .sum();
        // chi-square critical value at p = 0.01 with 19 degrees of freedom
        assert!(chi2 < 36.191, "chi2 = {chi2}");
    }

    #[test]
    fn cosine_schedule_starts_at_initial_and_decays() {
        let s = PruneSchedule {
            initial: 0.3,
            decay: PruneDecay::Cosine,
        };
        assert!((s.fraction_at(0, 10) - 0.3).abs() < 1e-15);
        let mut last = f64::INFINITY;
        for round in 0..10 {
            let p = s.fraction_at(round, 10);
            assert!(p <= last && p >= 0.0);
            last = p;
        }
    }

    #[test]
    fn digests_differ_across_topologies() {
        let a = er_init(&[(8, 8)], 0.3, 1).unwrap();
        let b = er_init(&[(8, 8)], 0.3, 2).unwrap();
        assert_ne!(a.digest(), b.digest());
        assert_eq!(a.digest(), a.clone().digest());
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            // Prune-then-grow with matched counts conserves cardinality
            // and never lifts weights at inactive positions off zero.
            #[test]
            fn matched_prune_grow_conserves_cardinality(
                seed in 0u64..1000,
                prune_fraction in 0.0f64..1.0,
            ) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let mut mask = er_init(&[(6, 20)], 0.4, seed).unwrap();
                let mut weights: Vec<f64> = (0..120)
                    .map(|i| if mask.layer(0)[i] { rng.random_range(-1.0..1.0) } else { 0.0 })
                    .collect();
                let before = mask.active_count();
                let k = ((prune_fraction * before as f64).ceil() as usize).min(before);
                mask.magnitude_prune(0, &mut weights, k).unwrap();
                mask.random_grow(0, &mut weights, k, &mut rng).unwrap();
                prop_assert_eq!(mask.active_count(), before);
                prop_assert!(mask.active_count() <= mask.active_cap());
                for (i, &w) in weights.iter().enumerate() {
                    prop_assert!(mask.layer(0)[i] || w == 0.0);
                }
            }
        }
    }
}
