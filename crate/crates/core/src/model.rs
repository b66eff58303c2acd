//! Shared domain types for charging-station scheduling.
//!
//! Units are fixed across the whole crate: energy in kWh, power in kW,
//! slot duration in hours. A demand of `L` kWh charged over slots of
//! `delta` hours corresponds to a power budget of `L / delta` kW spread
//! over the window. Slot indices are 1-based everywhere in the public API.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Relative tolerance for energy-conservation checks.
pub const ENERGY_TOL_REL: f64 = 1e-9;
/// Absolute tolerance on per-slot power nonnegativity.
pub const POWER_TOL_KW: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("time grid must have at least one slot")]
    EmptyGrid,
    #[error("slot duration must be positive, got {0}")]
    NonPositiveSlotHours(f64),
    #[error("expected {expected} slot labels, got {got}")]
    LabelCountMismatch { expected: usize, got: usize },
    #[error("invalid class window: arrival {arrival} must satisfy 1 <= arrival <= departure ({departure})")]
    InvalidClassWindow { arrival: usize, departure: usize },
    #[error("slot {slot} outside grid of {num_slots} slots")]
    SlotOutOfRange { slot: usize, num_slots: usize },
    #[error("energy must be nonnegative, got {0} kWh")]
    NegativeEnergy(f64),
    #[error("baseline length {got} does not match grid of {expected} slots")]
    BaselineLengthMismatch { expected: usize, got: usize },
    #[error("non-finite value encountered: {0}")]
    NonFinite(f64),
    #[error("cost curvature must be nonnegative, got {0}")]
    NegativeCurvature(f64),
    #[error("cost is decreasing at x = {x_min}: 2*quad*x_min + lin = {slope}")]
    DecreasingOnRange { x_min: f64, slope: f64 },
    #[error("invalid range [{0}, {1}]")]
    InvalidRange(f64, f64),
    #[error("schedule profile for class ({arrival},{departure}) has {got} slots, window needs {expected}")]
    ProfileLengthMismatch {
        arrival: usize,
        departure: usize,
        expected: usize,
        got: usize,
    },
    #[error("negative charging power {power} kW in class ({arrival},{departure})")]
    NegativePower {
        arrival: usize,
        departure: usize,
        power: f64,
    },
    #[error("schedule window ({arrival},{departure}) extends past grid of {num_slots} slots")]
    WindowOutOfGrid {
        arrival: usize,
        departure: usize,
        num_slots: usize,
    },
}

/// Discretization of the scheduling horizon: `num_slots` slots of
/// `slot_hours` hours each.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    num_slots: usize,
    slot_hours: f64,
    slot_labels: Option<Vec<String>>,
}

impl TimeGrid {
    pub fn new(num_slots: usize, slot_hours: f64) -> Result<Self, ModelError> {
        if num_slots == 0 {
            return Err(ModelError::EmptyGrid);
        }
        if !(slot_hours > 0.0) || !slot_hours.is_finite() {
            return Err(ModelError::NonPositiveSlotHours(slot_hours));
        }
        Ok(Self {
            num_slots,
            slot_hours,
            slot_labels: None,
        })
    }

    /// Attach wall-clock labels, one per slot (e.g. `"08:00"` for the slot
    /// starting at 8 am).
    pub fn with_labels(mut self, labels: Vec<String>) -> Result<Self, ModelError> {
        if labels.len() != self.num_slots {
            return Err(ModelError::LabelCountMismatch {
                expected: self.num_slots,
                got: labels.len(),
            });
        }
        self.slot_labels = Some(labels);
        Ok(self)
    }

    pub fn num_slots(&self) -> usize {
        self.num_slots
    }

    pub fn slot_hours(&self) -> f64 {
        self.slot_hours
    }

    pub fn slot_labels(&self) -> Option<&[String]> {
        self.slot_labels.as_deref()
    }

    pub fn label(&self, slot: usize) -> Option<&str> {
        self.slot_labels
            .as_ref()
            .and_then(|l| l.get(slot.checked_sub(1)?))
            .map(String::as_str)
    }

    pub fn check_slot(&self, slot: usize) -> Result<(), ModelError> {
        if slot == 0 || slot > self.num_slots {
            return Err(ModelError::SlotOutOfRange {
                slot,
                num_slots: self.num_slots,
            });
        }
        Ok(())
    }
}

/// An EV class `(a, d)`: all vehicles arriving at the start of slot `a`
/// and leaving at the end of slot `d`. Also used as the key for
/// per-departure groups in the online procedure (with `a` the group's
/// scheduling slot).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct EVClassKey {
    pub arrival: usize,
    pub departure: usize,
}

impl EVClassKey {
    pub fn new(arrival: usize, departure: usize) -> Result<Self, ModelError> {
        if arrival == 0 || arrival > departure {
            return Err(ModelError::InvalidClassWindow { arrival, departure });
        }
        Ok(Self { arrival, departure })
    }

    /// Number of slots in the charging window `[a, d]`.
    pub fn window_len(&self) -> usize {
        self.departure - self.arrival + 1
    }

    pub fn check_in_grid(&self, grid: &TimeGrid) -> Result<(), ModelError> {
        grid.check_slot(self.arrival)?;
        grid.check_slot(self.departure)
    }
}

impl std::fmt::Display for EVClassKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({},{})", self.arrival, self.departure)
    }
}

/// Aggregated energy need per EV class, in kWh.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassDemand {
    entries: BTreeMap<EVClassKey, f64>,
}

impl ClassDemand {
    pub fn new() -> Self {
        Self::default()
    }

    /// Add `kwh` to the class's need, creating the entry if absent.
    /// Classes with the same key are aggregates, so merging adds.
    pub fn add(&mut self, key: EVClassKey, kwh: f64) -> Result<(), ModelError> {
        if !kwh.is_finite() {
            return Err(ModelError::NonFinite(kwh));
        }
        if kwh < 0.0 {
            return Err(ModelError::NegativeEnergy(kwh));
        }
        *self.entries.entry(key).or_insert(0.0) += kwh;
        Ok(())
    }

    pub fn get(&self, key: &EVClassKey) -> Option<f64> {
        self.entries.get(key).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&EVClassKey, f64)> {
        self.entries.iter().map(|(k, &v)| (k, v))
    }

    pub fn keys(&self) -> impl Iterator<Item = &EVClassKey> {
        self.entries.keys()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total_energy_kwh(&self) -> f64 {
        self.entries.values().sum()
    }

    pub fn check_in_grid(&self, grid: &TimeGrid) -> Result<(), ModelError> {
        for key in self.entries.keys() {
            key.check_in_grid(grid)?;
        }
        Ok(())
    }

    /// Remove entries below `min_kwh` (used to drop numerically empty classes).
    pub fn prune_below(&mut self, min_kwh: f64) {
        self.entries.retain(|_, v| *v >= min_kwh);
    }
}

impl FromIterator<(EVClassKey, f64)> for ClassDemand {
    fn from_iter<I: IntoIterator<Item = (EVClassKey, f64)>>(iter: I) -> Self {
        let mut demand = ClassDemand::new();
        for (k, v) in iter {
            demand.add(k, v).expect("invalid demand entry");
        }
        demand
    }
}

/// Nonflexible power per slot, kW. Negative values mean net local
/// generation (e.g. a PV installation larger than the site's load).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineProfile {
    power: Vec<f64>,
}

impl BaselineProfile {
    pub fn new(power: Vec<f64>, grid: &TimeGrid) -> Result<Self, ModelError> {
        if power.len() != grid.num_slots() {
            return Err(ModelError::BaselineLengthMismatch {
                expected: grid.num_slots(),
                got: power.len(),
            });
        }
        if let Some(&bad) = power.iter().find(|v| !v.is_finite()) {
            return Err(ModelError::NonFinite(bad));
        }
        Ok(Self { power })
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.power
    }

    pub fn len(&self) -> usize {
        self.power.len()
    }

    pub fn is_empty(&self) -> bool {
        self.power.is_empty()
    }

    /// Power at 1-based slot `t`.
    pub fn at(&self, slot: usize) -> f64 {
        self.power[slot - 1]
    }

    pub fn min(&self) -> f64 {
        self.power.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.power.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Per-slot cost of the total load: `f(x) = quad*x^2 + lin*x + constant`,
/// convex and nondecreasing on `valid_range`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuadraticCost {
    quad: f64,
    lin: f64,
    constant: f64,
    valid_range: (f64, f64),
}

impl QuadraticCost {
    pub fn new(quad: f64, lin: f64, constant: f64, valid_range: (f64, f64)) -> Result<Self, ModelError> {
        for v in [quad, lin, constant, valid_range.0, valid_range.1] {
            if !v.is_finite() {
                return Err(ModelError::NonFinite(v));
            }
        }
        if quad < 0.0 {
            return Err(ModelError::NegativeCurvature(quad));
        }
        if valid_range.0 > valid_range.1 {
            return Err(ModelError::InvalidRange(valid_range.0, valid_range.1));
        }
        let slope = 2.0 * quad * valid_range.0 + lin;
        if slope < 0.0 {
            return Err(ModelError::DecreasingOnRange {
                x_min: valid_range.0,
                slope,
            });
        }
        Ok(Self {
            quad,
            lin,
            constant,
            valid_range,
        })
    }

    /// Default experiment cost: `quad = 0.5`, `constant = 0`, and `lin`
    /// chosen as `2*quad*|min expected total load|` so that `f` is
    /// increasing over the whole operational range, including negative
    /// PV-dominated loads. Charging only adds power, so the minimum
    /// expected total load is the baseline minimum.
    pub fn default_for(baseline: &BaselineProfile, total_demand_kwh: f64, slot_hours: f64) -> Self {
        let quad = 0.5;
        let x_min = baseline.min().min(0.0);
        let lin = 2.0 * quad * x_min.abs();
        let x_max = baseline.max() + total_demand_kwh / slot_hours;
        Self::new(quad, lin, 0.0, (x_min, x_max.max(x_min)))
            .expect("default cost is valid by construction")
    }

    pub fn eval(&self, x: f64) -> f64 {
        (self.quad * x + self.lin) * x + self.constant
    }

    /// Derivative `f'(x) = 2*quad*x + lin`.
    pub fn deriv(&self, x: f64) -> f64 {
        2.0 * self.quad * x + self.lin
    }

    pub fn quad(&self) -> f64 {
        self.quad
    }

    pub fn lin(&self) -> f64 {
        self.lin
    }

    pub fn constant(&self) -> f64 {
        self.constant
    }

    pub fn valid_range(&self) -> (f64, f64) {
        self.valid_range
    }
}

/// Aggregated charging power per class (or per departure group), kW.
/// Each profile covers exactly the window `[a, d]` of its key; the class
/// implicitly charges nothing outside it.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    profiles: BTreeMap<EVClassKey, Vec<f64>>,
}

impl Schedule {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, key: EVClassKey, profile: Vec<f64>) -> Result<(), ModelError> {
        if profile.len() != key.window_len() {
            return Err(ModelError::ProfileLengthMismatch {
                arrival: key.arrival,
                departure: key.departure,
                expected: key.window_len(),
                got: profile.len(),
            });
        }
        for &p in &profile {
            if !p.is_finite() {
                return Err(ModelError::NonFinite(p));
            }
            if p < -POWER_TOL_KW {
                return Err(ModelError::NegativePower {
                    arrival: key.arrival,
                    departure: key.departure,
                    power: p,
                });
            }
        }
        self.profiles.insert(key, profile);
        Ok(())
    }

    pub fn get(&self, key: &EVClassKey) -> Option<&[f64]> {
        self.profiles.get(key).map(Vec::as_slice)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&EVClassKey, &[f64])> {
        self.profiles.iter().map(|(k, v)| (k, v.as_slice()))
    }

    pub fn keys(&self) -> impl Iterator<Item = &EVClassKey> {
        self.profiles.keys()
    }

    pub fn len(&self) -> usize {
        self.profiles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.profiles.is_empty()
    }

    /// Energy delivered to `key`, kWh.
    pub fn energy_of(&self, key: &EVClassKey, slot_hours: f64) -> Option<f64> {
        self.profiles
            .get(key)
            .map(|p| p.iter().sum::<f64>() * slot_hours)
    }

    /// Check per-class energy conservation against `demand` at the
    /// crate-wide relative tolerance.
    pub fn check_conservation(
        &self,
        demand: &ClassDemand,
        slot_hours: f64,
    ) -> Result<(), ModelError> {
        for (key, need) in demand.iter() {
            let delivered = self.energy_of(key, slot_hours).unwrap_or(0.0);
            let tol = ENERGY_TOL_REL * need.abs().max(1.0);
            if (delivered - need).abs() > tol {
                return Err(ModelError::NegativeEnergy(delivered - need));
            }
        }
        Ok(())
    }
}

/// Per-slot sum of the baseline and every scheduled class power.
/// Returns a vector over the full grid (length `T`).
pub fn total_load(schedule: &Schedule, baseline: &BaselineProfile) -> Result<Vec<f64>, ModelError> {
    let mut load = baseline.as_slice().to_vec();
    for (key, profile) in schedule.iter() {
        if key.departure > load.len() {
            return Err(ModelError::WindowOutOfGrid {
                arrival: key.arrival,
                departure: key.departure,
                num_slots: load.len(),
            });
        }
        for (offset, &p) in profile.iter().enumerate() {
            load[key.arrival - 1 + offset] += p;
        }
    }
    Ok(load)
}

/// Operator cost of a total-load vector: `sum_t f(load_t)`.
pub fn cost(load: &[f64], f: &QuadraticCost) -> Result<f64, ModelError> {
    let mut acc = 0.0;
    for &x in load {
        if !x.is_finite() {
            return Err(ModelError::NonFinite(x));
        }
        acc += f.eval(x);
    }
    Ok(acc)
}
