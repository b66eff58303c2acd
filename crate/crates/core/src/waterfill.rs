//! Closed-form water-filling over a single charging window.
//!
//! Distributes an energy need across contiguous slots so that the total
//! load (baseline plus charge) is flattened to a common "water level" on
//! every slot that receives charge, while slots whose baseline already
//! exceeds the level stay untouched. This is the exact minimizer of
//! `sum_t f(baseline_t + charge_t)` subject to the energy budget and
//! nonnegative charge, for any increasing convex `f` — which is why the
//! kernel takes no cost function at all.
//!
//! The level is computed exactly from sorted prefix sums, with no
//! iteration. Callers may pass the baseline in any order; the result is
//! reported in the caller's slot order.

use std::collections::BTreeSet;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum WaterFillError {
    #[error("charging energy must be nonnegative, got {0} kWh")]
    NegativeEnergy(f64),
    #[error("charging energy must be finite")]
    NonFiniteEnergy,
    #[error("charging window is empty")]
    EmptyWindow,
    #[error("slot duration must be positive and finite, got {0}")]
    InvalidSlotHours(f64),
    #[error("non-finite baseline value {0}")]
    NonFiniteBaseline(f64),
}

/// Result of a single water-filling solve.
#[derive(Debug, Clone, PartialEq)]
pub struct WaterFillResult {
    /// Charging power per window slot, kW, in the caller's slot order.
    pub charge: Vec<f64>,
    /// Common total load on slots that receive charge, kW.
    pub level: f64,
    /// 1-based window positions with strictly positive charge.
    pub used_slots: BTreeSet<usize>,
}

impl WaterFillResult {
    /// Verify the defining properties against the inputs: nonnegativity,
    /// energy conservation, flat level on used slots, and baseline at or
    /// above the level on unused slots.
    pub fn check_invariants(
        &self,
        energy_kwh: f64,
        window_baseline: &[f64],
        delta_hours: f64,
    ) -> Result<(), String> {
        if self.charge.len() != window_baseline.len() {
            return Err(format!(
                "charge length {} != window length {}",
                self.charge.len(),
                window_baseline.len()
            ));
        }
        let mut sum = 0.0;
        for (i, &c) in self.charge.iter().enumerate() {
            if c < 0.0 {
                return Err(format!("negative charge {c} at window slot {}", i + 1));
            }
            sum += c;
            let total = window_baseline[i] + c;
            if self.used_slots.contains(&(i + 1)) {
                if (total - self.level).abs() > 1e-9 {
                    return Err(format!(
                        "used slot {} total {total} differs from level {}",
                        i + 1,
                        self.level
                    ));
                }
            } else if window_baseline[i] < self.level - 1e-9 {
                return Err(format!(
                    "unused slot {} baseline {} below level {}",
                    i + 1,
                    window_baseline[i],
                    self.level
                ));
            }
        }
        let delivered = sum * delta_hours;
        let tol = 1e-9 * energy_kwh.abs().max(1.0);
        if (delivered - energy_kwh).abs() > tol {
            return Err(format!(
                "delivered {delivered} kWh != requested {energy_kwh} kWh"
            ));
        }
        Ok(())
    }
}

/// Spread `energy_kwh` over the window so the total load is flattened.
///
/// The power budget is `energy_kwh / delta_hours` kW. The water level is
/// found by walking the sorted baseline's fill breakpoints; the last
/// breakpoint interval is unbounded, so the solve always succeeds for
/// any nonnegative energy.
pub fn water_fill(
    energy_kwh: f64,
    window_baseline: &[f64],
    delta_hours: f64,
) -> Result<WaterFillResult, WaterFillError> {
    if !energy_kwh.is_finite() {
        return Err(WaterFillError::NonFiniteEnergy);
    }
    if energy_kwh < 0.0 {
        return Err(WaterFillError::NegativeEnergy(energy_kwh));
    }
    if window_baseline.is_empty() {
        return Err(WaterFillError::EmptyWindow);
    }
    if !delta_hours.is_finite() || delta_hours <= 0.0 {
        return Err(WaterFillError::InvalidSlotHours(delta_hours));
    }
    if let Some(&bad) = window_baseline.iter().find(|b| !b.is_finite()) {
        return Err(WaterFillError::NonFiniteBaseline(bad));
    }

    let n = window_baseline.len();
    let target_kw = energy_kwh / delta_hours;

    // Stable sort keeps ties deterministic; equal baselines then receive
    // equal charge by the level property.
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| window_baseline[i].partial_cmp(&window_baseline[j]).unwrap());

    // Walking the sorted slots, the fill needed to raise the k cheapest
    // slots up to the (k+1)-th baseline is k*b_(k+1) - prefix_k. The
    // breakpoints are nondecreasing, so the first interval containing the
    // target gives the number of used slots; the last interval is
    // unbounded.
    let mut prefix = 0.0;
    let mut used = n;
    let mut level = f64::NAN;
    for k in 1..=n {
        prefix += window_baseline[order[k - 1]];
        if k == n || target_kw <= k as f64 * window_baseline[order[k]] - prefix {
            used = k;
            level = (target_kw + prefix) / k as f64;
            break;
        }
    }

    let mut charge = vec![0.0; n];
    let mut used_slots = BTreeSet::new();
    for &i in order.iter().take(used) {
        // max(0, ..) clamps roundoff when the target sits exactly on a
        // breakpoint.
        let c = (level - window_baseline[i]).max(0.0);
        charge[i] = c;
        if c > 0.0 {
            used_slots.insert(i + 1);
        }
    }

    Ok(WaterFillResult {
        charge,
        level,
        used_slots,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Independent oracle: bisect on the water level until the implied
    /// charge integrates to the requested energy.
    fn bisection_oracle(energy_kwh: f64, baseline: &[f64], delta_hours: f64) -> (Vec<f64>, f64) {
        let target = energy_kwh / delta_hours;
        let mut lo = baseline.iter().copied().fold(f64::INFINITY, f64::min);
        let mut hi = baseline.iter().copied().fold(f64::NEG_INFINITY, f64::max) + target;
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            let filled: f64 = baseline.iter().map(|&b| (mid - b).max(0.0)).sum();
            if filled > target {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        let level = 0.5 * (lo + hi);
        let charge = baseline.iter().map(|&b| (level - b).max(0.0)).collect();
        (charge, level)
    }

    #[test]
    fn zero_energy_keeps_everything_off() {
        let r = water_fill(0.0, &[3.0, -1.0, 2.0], 1.0).unwrap();
        assert_eq!(r.charge, vec![0.0, 0.0, 0.0]);
        assert!(r.used_slots.is_empty());
        r.check_invariants(0.0, &[3.0, -1.0, 2.0], 1.0).unwrap();
    }

    #[test]
    fn flat_baseline_splits_evenly() {
        let r = water_fill(4.0, &[0.0, 0.0], 1.0).unwrap();
        assert_eq!(r.charge, vec![2.0, 2.0]);
        assert_eq!(r.level, 2.0);
    }

    #[test]
    fn partial_fill_uses_cheap_slots_only() {
        // Level 3 fills the two cheapest slots; the 3 kW slot stays off.
        let r = water_fill(3.0, &[3.0, 1.0, 2.0], 1.0).unwrap();
        assert_eq!(r.charge, vec![0.0, 2.0, 1.0]);
        assert_eq!(r.level, 3.0);
        assert_eq!(r.used_slots.iter().copied().collect::<Vec<_>>(), vec![2, 3]);
    }

    #[test]
    fn large_energy_floods_all_slots() {
        let r = water_fill(10.0, &[3.0, 1.0, 2.0], 1.0).unwrap();
        let level = 16.0 / 3.0;
        assert!((r.level - level).abs() < 1e-12);
        for (c, b) in r.charge.iter().zip([3.0, 1.0, 2.0]) {
            assert!((c - (level - b)).abs() < 1e-12);
        }
        assert_eq!(r.used_slots.len(), 3);
    }

    #[test]
    fn delta_scales_the_power_target() {
        // 4 kWh over 2 h slots is a 2 kW budget.
        let r = water_fill(4.0, &[0.0, 0.0], 2.0).unwrap();
        assert_eq!(r.charge, vec![1.0, 1.0]);
        r.check_invariants(4.0, &[0.0, 0.0], 2.0).unwrap();
    }

    #[test]
    fn input_validation() {
        assert!(matches!(
            water_fill(-1.0, &[0.0], 1.0),
            Err(WaterFillError::NegativeEnergy(_))
        ));
        assert!(matches!(
            water_fill(1.0, &[], 1.0),
            Err(WaterFillError::EmptyWindow)
        ));
        assert!(matches!(
            water_fill(1.0, &[f64::INFINITY], 1.0),
            Err(WaterFillError::NonFiniteBaseline(_))
        ));
        assert!(matches!(
            water_fill(1.0, &[0.0], 0.0),
            Err(WaterFillError::InvalidSlotHours(_))
        ));
        assert!(matches!(
            water_fill(f64::NAN, &[0.0], 1.0),
            Err(WaterFillError::NonFiniteEnergy)
        ));
    }

    #[test]
    fn level_is_continuous_and_linear_between_breakpoints() {
        let baseline = [3.0, 1.0, 2.0];
        // Fill breakpoints for the sorted baseline [1, 2, 3]: the level
        // reaches 2 kW after 1 kWh and 3 kW after 3 kWh (at delta = 1).
        for bp in [1.0, 3.0] {
            let eps = 1e-9;
            let lo = water_fill(bp - eps, &baseline, 1.0).unwrap().level;
            let hi = water_fill(bp + eps, &baseline, 1.0).unwrap().level;
            assert!((hi - lo).abs() < 1e-6, "level jumps at breakpoint {bp}");
        }
        // Within a segment the level is affine in energy.
        for (a, b) in [(1.0, 3.0), (3.0, 9.0)] {
            let la = water_fill(a, &baseline, 1.0).unwrap().level;
            let lb = water_fill(b, &baseline, 1.0).unwrap().level;
            let lm = water_fill(0.5 * (a + b), &baseline, 1.0).unwrap().level;
            assert!((lm - 0.5 * (la + lb)).abs() < 1e-12);
        }
    }

    #[test]
    fn equal_baselines_get_equal_charge() {
        let r = water_fill(5.0, &[2.0, 1.0, 2.0, 1.0], 1.0).unwrap();
        assert!((r.charge[0] - r.charge[2]).abs() < 1e-12);
        assert!((r.charge[1] - r.charge[3]).abs() < 1e-12);
    }

    /// Exhaustive grid search over feasible allocations for small windows.
    fn grid_best_cost(
        energy_kwh: f64,
        baseline: &[f64],
        steps_per_slot: usize,
        f: &dyn Fn(f64) -> f64,
    ) -> f64 {
        let n = baseline.len();
        let steps = steps_per_slot * n;
        let target = energy_kwh; // delta = 1
        let mut best = f64::INFINITY;
        let mut alloc = vec![0usize; n];
        fn rec(
            slot: usize,
            left: usize,
            alloc: &mut Vec<usize>,
            n: usize,
            steps: usize,
            target: f64,
            baseline: &[f64],
            f: &dyn Fn(f64) -> f64,
            best: &mut f64,
        ) {
            if slot == n - 1 {
                alloc[slot] = left;
                let cost: f64 = (0..n)
                    .map(|i| f(baseline[i] + alloc[i] as f64 / steps as f64 * target))
                    .sum();
                if cost < *best {
                    *best = cost;
                }
                return;
            }
            for m in 0..=left {
                alloc[slot] = m;
                rec(slot + 1, left - m, alloc, n, steps, target, baseline, f, best);
            }
        }
        rec(0, steps, &mut alloc, n, steps, target, baseline, f, &mut best);
        best
    }

    #[test]
    fn optimal_for_any_increasing_convex_cost() {
        // The same charge vector must beat every grid allocation under
        // several different increasing convex costs.
        let cases: [(&[f64], f64); 3] = [
            (&[3.0, 1.0, 2.0], 3.0),
            (&[0.5, 0.5, 4.0, 2.0], 6.0),
            (&[-2.0, 1.0], 2.5),
        ];
        let costs: [&dyn Fn(f64) -> f64; 3] = [
            &|x| x * x + 10.0 * x,
            &|x| (0.4 * x).exp(),
            &|x| x * x * 0.5 + 4.0 * x + 1.0,
        ];
        for (baseline, energy) in cases {
            let wf = water_fill(energy, baseline, 1.0).unwrap();
            for f in costs {
                let wf_cost: f64 = baseline
                    .iter()
                    .zip(&wf.charge)
                    .map(|(&b, &c)| f(b + c))
                    .sum();
                let grid = grid_best_cost(energy, baseline, 50, f);
                assert!(
                    wf_cost <= grid + 1e-6,
                    "water-fill cost {wf_cost} beaten by grid {grid}"
                );
            }
        }
    }

    proptest! {
        #[test]
        fn matches_bisection_oracle(
            baseline in proptest::collection::vec(-10.0f64..10.0, 1..7),
            energy in 0.0f64..50.0,
            delta in prop_oneof![Just(0.5f64), Just(1.0), Just(2.0)],
        ) {
            let wf = water_fill(energy, &baseline, delta).unwrap();
            let (oracle_charge, oracle_level) = bisection_oracle(energy, &baseline, delta);
            for (a, b) in wf.charge.iter().zip(&oracle_charge) {
                prop_assert!((a - b).abs() < 1e-8);
            }
            if energy > 0.0 {
                prop_assert!((wf.level - oracle_level).abs() < 1e-8);
            }
            wf.check_invariants(energy, &baseline, delta).map_err(TestCaseError::fail)?;
        }

        #[test]
        fn level_is_monotone_in_energy(
            baseline in proptest::collection::vec(-10.0f64..10.0, 1..7),
            e1 in 0.0f64..50.0,
            extra in 0.0f64..10.0,
        ) {
            let l1 = water_fill(e1, &baseline, 1.0).unwrap().level;
            let l2 = water_fill(e1 + extra, &baseline, 1.0).unwrap().level;
            prop_assert!(l2 >= l1 - 1e-12);
        }

        #[test]
        fn permuting_the_baseline_permutes_the_charge(
            (baseline, perm) in proptest::collection::vec(-10.0f64..10.0, 2..7)
                .prop_flat_map(|b| {
                    let n = b.len();
                    (Just(b), Just((0..n).collect::<Vec<usize>>()).prop_shuffle())
                }),
            energy in 0.0f64..30.0,
        ) {
            let direct = water_fill(energy, &baseline, 1.0).unwrap();
            let permuted_baseline: Vec<f64> = perm.iter().map(|&i| baseline[i]).collect();
            let permuted = water_fill(energy, &permuted_baseline, 1.0).unwrap();
            for (pos, &src) in perm.iter().enumerate() {
                prop_assert!((permuted.charge[pos] - direct.charge[src]).abs() < 1e-12);
            }
        }
    }
}
