//! Full-information scheduling over the whole horizon.
//!
//! The main solver is a cyclic block-coordinate descent where each block
//! is one EV class, minimized exactly by [`water_fill`] against the
//! baseline plus every other class's current profile. Each block
//! subproblem is strictly convex for `quad > 0`, so the sweep converges
//! to the unique optimal cost (the optimal profiles themselves need not
//! be unique).
//!
//! Two independent cross-checks live alongside it: a projected-gradient
//! solver on the same feasible set, and an exhaustive grid search for
//! very small instances. Both avoid the water-filling kernel entirely.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::model::{
    cost, total_load, BaselineProfile, ClassDemand, EVClassKey, ModelError, QuadraticCost,
    Schedule, TimeGrid,
};
use crate::waterfill::{water_fill, WaterFillError};

/// Charge above this is treated as "the class charges in this slot" when
/// checking stationarity conditions.
pub const ACTIVE_CHARGE_TOL_KW: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum OfflineError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    WaterFill(#[from] WaterFillError),
    #[error(
        "no convergence after {sweeps} sweeps (last profile change {last_change_kw} kW, cost {cost})"
    )]
    NonConvergence {
        sweeps: usize,
        last_change_kw: f64,
        cost: f64,
        best: Box<OfflineSolution>,
    },
    #[error("instance too large for exhaustive search: {reason}")]
    TooLarge { reason: String },
}

/// Which direction the coordinate sweep walks the (a, d)-sorted classes.
/// Exposed so equal-cost/different-argmin behaviour can be exercised.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SweepOrder {
    #[default]
    Forward,
    Reverse,
}

#[derive(Debug, Clone)]
pub struct SolveOptions {
    /// Stop when no class profile moved more than this many kW in a sweep.
    pub profile_change_tol_kw: f64,
    pub max_sweeps: usize,
    pub sweep_order: SweepOrder,
    /// Start from a previous solution instead of the uniform spread.
    /// Profiles are rescaled to the demand being solved, so a base
    /// solution warm-starts nearby perturbed instances.
    pub warm_start: Option<Schedule>,
    /// Record the objective after every sweep (testing hook).
    pub record_trace: bool,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self {
            profile_change_tol_kw: 1e-10,
            max_sweeps: 100_000,
            sweep_order: SweepOrder::Forward,
            warm_start: None,
            record_trace: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct OfflineSolution {
    pub schedule: Schedule,
    pub optimal_cost: f64,
    /// Sweeps (or gradient iterations) performed.
    pub iterations: usize,
    pub kkt_residual: f64,
    /// Objective after each sweep; empty unless requested.
    pub cost_trace: Vec<f64>,
}

/// Stationarity residual of a schedule: for every class, the cost slope
/// `f'(total load)` must be flat across the slots where the class
/// charges and at least that value elsewhere in its window. Returns the
/// worst violation, scaled by the class's multiplier magnitude (floored
/// at one). Classes with no active slot contribute nothing.
pub fn kkt_residual(
    schedule: &Schedule,
    baseline: &BaselineProfile,
    f: &QuadraticCost,
) -> Result<f64, ModelError> {
    let load = total_load(schedule, baseline)?;
    let mut worst = 0.0f64;
    for (key, profile) in schedule.iter() {
        let slopes: Vec<f64> = (key.arrival..=key.departure)
            .map(|t| f.deriv(load[t - 1]))
            .collect();
        let active: Vec<usize> = profile
            .iter()
            .enumerate()
            .filter(|(_, &c)| c > ACTIVE_CHARGE_TOL_KW)
            .map(|(i, _)| i)
            .collect();
        if active.is_empty() {
            continue;
        }
        let mu = active.iter().map(|&i| slopes[i]).sum::<f64>() / active.len() as f64;
        let scale = mu.abs().max(1.0);
        for (i, &slope) in slopes.iter().enumerate() {
            let violation = if profile[i] > ACTIVE_CHARGE_TOL_KW {
                (slope - mu).abs()
            } else {
                (mu - slope).max(0.0)
            };
            worst = worst.max(violation / scale);
        }
    }
    Ok(worst)
}

fn uniform_schedule(demand: &ClassDemand, slot_hours: f64) -> Schedule {
    let mut schedule = Schedule::new();
    for (key, kwh) in demand.iter() {
        let w = key.window_len();
        let per_slot = kwh / slot_hours / w as f64;
        schedule
            .insert(*key, vec![per_slot; w])
            .expect("uniform profile is valid");
    }
    schedule
}

fn initial_schedule(demand: &ClassDemand, slot_hours: f64, warm: Option<&Schedule>) -> Schedule {
    let Some(warm) = warm else {
        return uniform_schedule(demand, slot_hours);
    };
    let mut schedule = Schedule::new();
    for (key, kwh) in demand.iter() {
        let w = key.window_len();
        let target_sum = kwh / slot_hours;
        let profile = match warm.get(key) {
            Some(p) if p.len() == w && p.iter().sum::<f64>() > 0.0 => {
                let scale = target_sum / p.iter().sum::<f64>();
                p.iter().map(|&v| v * scale).collect()
            }
            _ => vec![target_sum / w as f64; w],
        };
        schedule.insert(*key, profile).expect("scaled profile is valid");
    }
    schedule
}

/// Solve the full-horizon problem by cyclic exact minimization over
/// classes. Deterministic given the options.
pub fn solve_offline(
    demand: &ClassDemand,
    baseline: &BaselineProfile,
    grid: &TimeGrid,
    f: &QuadraticCost,
    options: &SolveOptions,
) -> Result<OfflineSolution, OfflineError> {
    demand.check_in_grid(grid)?;
    let delta = grid.slot_hours();
    let mut schedule = initial_schedule(demand, delta, options.warm_start.as_ref());

    let keys: Vec<EVClassKey> = {
        let mut k: Vec<EVClassKey> = demand.keys().copied().collect();
        if options.sweep_order == SweepOrder::Reverse {
            k.reverse();
        }
        k
    };
    let energies: BTreeMap<EVClassKey, f64> = demand.iter().map(|(k, v)| (*k, v)).collect();

    let mut trace = Vec::new();
    let mut last_change = f64::INFINITY;
    let mut sweeps = 0;
    while sweeps < options.max_sweeps {
        sweeps += 1;
        // Reassemble the running total each sweep so incremental updates
        // cannot drift.
        let mut total = total_load(&schedule, baseline)?;
        let mut max_change = 0.0f64;
        for key in &keys {
            let a = key.arrival - 1;
            let d = key.departure;
            let old = schedule.get(key).expect("key present").to_vec();
            for (offset, &p) in old.iter().enumerate() {
                total[a + offset] -= p;
            }
            let wf = water_fill(energies[key], &total[a..d], delta)?;
            for (offset, &p) in wf.charge.iter().enumerate() {
                total[a + offset] += p;
                max_change = max_change.max((p - old[offset]).abs());
            }
            schedule.insert(*key, wf.charge)?;
        }
        if options.record_trace {
            let load = total_load(&schedule, baseline)?;
            trace.push(cost(&load, f)?);
        }
        last_change = max_change;
        if max_change < options.profile_change_tol_kw {
            let load = total_load(&schedule, baseline)?;
            let optimal_cost = cost(&load, f)?;
            let kkt = kkt_residual(&schedule, baseline, f)?;
            return Ok(OfflineSolution {
                schedule,
                optimal_cost,
                iterations: sweeps,
                kkt_residual: kkt,
                cost_trace: trace,
            });
        }
    }

    let load = total_load(&schedule, baseline)?;
    let best_cost = cost(&load, f)?;
    let kkt = kkt_residual(&schedule, baseline, f)?;
    Err(OfflineError::NonConvergence {
        sweeps,
        last_change_kw: last_change,
        cost: best_cost,
        best: Box::new(OfflineSolution {
            schedule,
            optimal_cost: best_cost,
            iterations: sweeps,
            kkt_residual: kkt,
            cost_trace: trace,
        }),
    })
}

#[derive(Debug, Clone)]
pub struct PgOptions {
    pub max_iters: usize,
    /// Stop when no variable moved more than this many kW in one step.
    pub step_change_tol_kw: f64,
}

impl Default for PgOptions {
    fn default() -> Self {
        Self {
            max_iters: 500_000,
            step_change_tol_kw: 1e-12,
        }
    }
}

/// Euclidean projection onto `{v >= 0, sum v = total}` (sorted
/// cumulative-mean rule).
fn project_simplex(v: &[f64], total: f64) -> Vec<f64> {
    let mut sorted = v.to_vec();
    sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let mut cumsum = 0.0;
    let mut tau = sorted[0] - total; // single-element fallback
    for (i, &u) in sorted.iter().enumerate() {
        cumsum += u;
        let candidate = (cumsum - total) / (i + 1) as f64;
        if u - candidate > 0.0 {
            tau = candidate;
        }
    }
    v.iter().map(|&x| (x - tau).max(0.0)).collect()
}

/// Independent oracle solver: fixed-step projected gradient on the same
/// feasible set. Never calls the water-filling kernel.
pub fn solve_offline_projected_gradient(
    demand: &ClassDemand,
    baseline: &BaselineProfile,
    grid: &TimeGrid,
    f: &QuadraticCost,
    options: &PgOptions,
) -> Result<OfflineSolution, OfflineError> {
    demand.check_in_grid(grid)?;
    let delta = grid.slot_hours();
    let keys: Vec<EVClassKey> = demand.keys().copied().collect();
    let targets: Vec<f64> = keys
        .iter()
        .map(|k| demand.get(k).unwrap_or(0.0) / delta)
        .collect();

    let mut x: Vec<Vec<f64>> = keys
        .iter()
        .zip(&targets)
        .map(|(k, &s)| vec![s / k.window_len() as f64; k.window_len()])
        .collect();

    let assemble = |x: &[Vec<f64>]| -> Vec<f64> {
        let mut load = baseline.as_slice().to_vec();
        for (k, profile) in keys.iter().zip(x) {
            for (offset, &p) in profile.iter().enumerate() {
                load[k.arrival - 1 + offset] += p;
            }
        }
        load
    };

    let finish = |x: &[Vec<f64>], iterations: usize| -> Result<OfflineSolution, OfflineError> {
        let mut schedule = Schedule::new();
        for (k, profile) in keys.iter().zip(x) {
            schedule.insert(*k, profile.clone())?;
        }
        let load = total_load(&schedule, baseline)?;
        let optimal_cost = cost(&load, f)?;
        let kkt = kkt_residual(&schedule, baseline, f)?;
        Ok(OfflineSolution {
            schedule,
            optimal_cost,
            iterations,
            kkt_residual: kkt,
            cost_trace: Vec::new(),
        })
    };

    if keys.is_empty() {
        return finish(&x, 0);
    }

    // Lipschitz constant of the gradient: 2*quad times the worst-case
    // number of classes stacked on one slot.
    let mut overlap = vec![0usize; grid.num_slots()];
    for k in &keys {
        for slot in k.arrival..=k.departure {
            overlap[slot - 1] += 1;
        }
    }
    let lipschitz = 2.0 * f.quad() * overlap.iter().copied().max().unwrap_or(1) as f64;
    if lipschitz <= 0.0 {
        // Linear cost: every feasible point has the same objective.
        return finish(&x, 0);
    }
    let step = 1.0 / lipschitz;

    for iter in 1..=options.max_iters {
        let load = assemble(&x);
        let mut max_change = 0.0f64;
        for (c, k) in keys.iter().enumerate() {
            let moved: Vec<f64> = x[c]
                .iter()
                .enumerate()
                .map(|(offset, &v)| v - step * f.deriv(load[k.arrival - 1 + offset]))
                .collect();
            let projected = project_simplex(&moved, targets[c]);
            for (offset, &nv) in projected.iter().enumerate() {
                max_change = max_change.max((nv - x[c][offset]).abs());
            }
            x[c] = projected;
        }
        if max_change < options.step_change_tol_kw {
            return finish(&x, iter);
        }
    }

    let solution = finish(&x, options.max_iters)?;
    Err(OfflineError::NonConvergence {
        sweeps: options.max_iters,
        last_change_kw: f64::NAN,
        cost: solution.optimal_cost,
        best: Box::new(solution),
    })
}

#[derive(Debug, Clone, Copy)]
pub struct BruteForceBound {
    /// Best cost over all grid-feasible allocations (each one is feasible
    /// for the true problem, so this upper-bounds nothing and
    /// lower-bounds nothing except by the grid's own resolution; the
    /// exact solver must come in at or below it).
    pub best_cost: f64,
    pub evaluated: u64,
}

/// Exhaustive search over per-class simplex discretizations with
/// `steps_per_slot * window_len` steps per class.
pub fn brute_force_oracle(
    demand: &ClassDemand,
    baseline: &BaselineProfile,
    grid: &TimeGrid,
    f: &QuadraticCost,
    steps_per_slot: usize,
) -> Result<BruteForceBound, OfflineError> {
    demand.check_in_grid(grid)?;
    let total_vars: usize = demand.keys().map(|k| k.window_len()).sum();
    if total_vars > 8 {
        return Err(OfflineError::TooLarge {
            reason: format!("{total_vars} variables, limit 8"),
        });
    }
    if steps_per_slot == 0 || steps_per_slot > 50 {
        return Err(OfflineError::TooLarge {
            reason: format!("steps_per_slot {steps_per_slot} outside 1..=50"),
        });
    }

    let delta = grid.slot_hours();
    let keys: Vec<EVClassKey> = demand.keys().copied().collect();
    let class_steps: Vec<usize> = keys.iter().map(|k| steps_per_slot * k.window_len()).collect();
    let class_power: Vec<f64> = keys
        .iter()
        .map(|k| demand.get(k).unwrap_or(0.0) / delta)
        .collect();

    let mut load = baseline.as_slice().to_vec();
    let mut best = f64::INFINITY;
    let mut evaluated = 0u64;

    fn per_slot_alloc(
        class: usize,
        slot_offset: usize,
        steps_left: usize,
        keys: &[EVClassKey],
        class_steps: &[usize],
        class_power: &[f64],
        load: &mut Vec<f64>,
        f: &QuadraticCost,
        best: &mut f64,
        evaluated: &mut u64,
    ) {
        if class == keys.len() {
            *evaluated += 1;
            let cost: f64 = load.iter().map(|&x| f.eval(x)).sum();
            if cost < *best {
                *best = cost;
            }
            return;
        }
        let key = keys[class];
        let w = key.window_len();
        let unit = if class_steps[class] > 0 {
            class_power[class] / class_steps[class] as f64
        } else {
            0.0
        };
        if slot_offset == w - 1 {
            let add = steps_left as f64 * unit;
            load[key.arrival - 1 + slot_offset] += add;
            per_slot_alloc(
                class + 1,
                0,
                class_steps.get(class + 1).copied().unwrap_or(0),
                keys,
                class_steps,
                class_power,
                load,
                f,
                best,
                evaluated,
            );
            load[key.arrival - 1 + slot_offset] -= add;
            return;
        }
        for m in 0..=steps_left {
            let add = m as f64 * unit;
            load[key.arrival - 1 + slot_offset] += add;
            per_slot_alloc(
                class,
                slot_offset + 1,
                steps_left - m,
                keys,
                class_steps,
                class_power,
                load,
                f,
                best,
                evaluated,
            );
            load[key.arrival - 1 + slot_offset] -= add;
        }
    }

    per_slot_alloc(
        0,
        0,
        class_steps.first().copied().unwrap_or(0),
        &keys,
        &class_steps,
        &class_power,
        &mut load,
        f,
        &mut best,
        &mut evaluated,
    );

    Ok(BruteForceBound {
        best_cost: best,
        evaluated,
    })
}
