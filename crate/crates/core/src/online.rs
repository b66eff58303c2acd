//! Event-driven scheduling with information arriving over time.
//!
//! The operator reacts to each arrival slot in two steps: fold the newly
//! announced needs into the per-departure remaining energies (crediting
//! whatever the previous plan already charged), then rebuild the whole
//! forward plan by water-filling the departure groups in increasing
//! departure order, each against the baseline plus the groups planned
//! before it. Slots that have already elapsed are frozen and never
//! rewritten.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::model::{cost, BaselineProfile, ClassDemand, ModelError, QuadraticCost, TimeGrid};
use crate::waterfill::{water_fill, WaterFillError};

#[derive(Debug, Error)]
pub enum OnlineError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    WaterFill(#[from] WaterFillError),
    #[error("event at slot {arrival} arrives at or before the previous event at slot {last}")]
    OutOfOrderEvent { arrival: usize, last: usize },
    #[error("demand for departure slot {departure} must not precede arrival slot {arrival}")]
    DemandBeforeArrival { departure: usize, arrival: usize },
    #[error(
        "infeasible scenario: {remaining_kwh} kWh still due at departure slot {departure}, already past at arrival {arrival}"
    )]
    InfeasiblePastDemand {
        departure: usize,
        arrival: usize,
        remaining_kwh: f64,
    },
    #[error("no arrival event has been applied yet")]
    NoArrival,
    #[error("nothing to schedule: no remaining needs at arrival {arrival}")]
    NothingToSchedule { arrival: usize },
    #[error("charging energy must be nonnegative and finite, got {0} kWh")]
    BadDemand(f64),
    #[error("delivered {delivered_kwh} kWh but {expected_kwh} kWh were demanded")]
    ConservationViolated {
        delivered_kwh: f64,
        expected_kwh: f64,
    },
}

/// All EV classes announcing themselves at one arrival slot, keyed by
/// departure slot. Classes arriving at the same slot always form a
/// single event.
#[derive(Debug, Clone, PartialEq)]
pub struct ArrivalEvent {
    pub arrival: usize,
    /// Departure slot -> newly announced aggregated need, kWh.
    pub new_demands: BTreeMap<usize, f64>,
}

impl ArrivalEvent {
    pub fn new(arrival: usize, new_demands: BTreeMap<usize, f64>) -> Result<Self, OnlineError> {
        for (&d, &kwh) in &new_demands {
            if d < arrival {
                return Err(OnlineError::DemandBeforeArrival {
                    departure: d,
                    arrival,
                });
            }
            if !kwh.is_finite() || kwh < 0.0 {
                return Err(OnlineError::BadDemand(kwh));
            }
        }
        Ok(Self {
            arrival,
            new_demands,
        })
    }

    /// Turn a class demand table into the ordered event sequence the
    /// operator would see, one event per distinct arrival slot.
    pub fn sequence_from_demand(demand: &ClassDemand) -> Vec<ArrivalEvent> {
        let mut by_arrival: BTreeMap<usize, BTreeMap<usize, f64>> = BTreeMap::new();
        for (key, kwh) in demand.iter() {
            *by_arrival
                .entry(key.arrival)
                .or_default()
                .entry(key.departure)
                .or_insert(0.0) += kwh;
        }
        by_arrival
            .into_iter()
            .map(|(arrival, new_demands)| ArrivalEvent {
                arrival,
                new_demands,
            })
            .collect()
    }
}

/// The operator's evolving knowledge: remaining needs per departure,
/// the currently programmed forward profiles, and the charging already
/// executed on past slots.
#[derive(Debug, Clone)]
pub struct OnlineState {
    grid: TimeGrid,
    baseline: BaselineProfile,
    /// Slot of the last applied event.
    last_arrival: Option<usize>,
    /// Departure slot -> remaining energy, kWh; only positive entries.
    remaining: BTreeMap<usize, f64>,
    /// Departure slot -> programmed power over `[last_arrival, d]`, kW.
    programmed: BTreeMap<usize, Vec<f64>>,
    /// Executed aggregate charging for slots `1..=realized.len()`, kW.
    realized: Vec<f64>,
    /// Same as `realized`, split by departure group.
    realized_by_group: BTreeMap<usize, Vec<f64>>,
    /// Running total of announced energy, used to scale the "numerically
    /// zero" threshold for remaining needs.
    seen_kwh: f64,
}

impl OnlineState {
    pub fn new(grid: TimeGrid, baseline: BaselineProfile) -> Result<Self, ModelError> {
        if baseline.len() != grid.num_slots() {
            return Err(ModelError::BaselineLengthMismatch {
                expected: grid.num_slots(),
                got: baseline.len(),
            });
        }
        Ok(Self {
            grid,
            baseline,
            last_arrival: None,
            remaining: BTreeMap::new(),
            programmed: BTreeMap::new(),
            realized: Vec::new(),
            realized_by_group: BTreeMap::new(),
            seen_kwh: 0.0,
        })
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn baseline(&self) -> &BaselineProfile {
        &self.baseline
    }

    pub fn last_arrival(&self) -> Option<usize> {
        self.last_arrival
    }

    pub fn remaining(&self) -> &BTreeMap<usize, f64> {
        &self.remaining
    }

    pub fn programmed(&self) -> &BTreeMap<usize, Vec<f64>> {
        &self.programmed
    }

    /// Executed aggregate charging, kW, for slots `1..=len`.
    pub fn realized(&self) -> &[f64] {
        &self.realized
    }

    fn zero_tol(&self) -> f64 {
        1e-9 * self.seen_kwh.max(1.0)
    }

    /// Execute the programmed profiles for slots up to and including
    /// `end_slot`, appending to the realized log.
    fn execute_through(&mut self, end_slot: usize) {
        let start = self.last_arrival.unwrap_or(1);
        while self.realized.len() < end_slot {
            let slot = self.realized.len() + 1;
            let mut power = 0.0;
            for (&d, profile) in &self.programmed {
                if slot >= start && slot <= d {
                    let p = profile.get(slot - start).copied().unwrap_or(0.0);
                    power += p;
                    if p != 0.0 {
                        let log = self
                            .realized_by_group
                            .entry(d)
                            .or_insert_with(|| vec![0.0; self.grid.num_slots()]);
                        log[slot - 1] = p;
                    }
                }
            }
            self.realized.push(power);
        }
    }
}

/// Fold one arrival event into the state: credit what the previous plan
/// charged since the last event, add the newly announced needs, and
/// freeze the elapsed slots. The forward plan is cleared; call
/// [`schedule_arrival`] to rebuild it.
pub fn advance_and_update(
    state: &OnlineState,
    event: &ArrivalEvent,
) -> Result<OnlineState, OnlineError> {
    let mut next = state.clone();
    next.grid.check_slot(event.arrival)?;
    for &d in event.new_demands.keys() {
        next.grid.check_slot(d)?;
    }
    if let Some(last) = state.last_arrival {
        if event.arrival <= last {
            return Err(OnlineError::OutOfOrderEvent {
                arrival: event.arrival,
                last,
            });
        }
    }

    // Freeze everything before the new arrival.
    next.execute_through(event.arrival - 1);

    // Credit the energy charged since the previous event.
    if let Some(prev) = state.last_arrival {
        let elapsed_end = event.arrival - 1;
        for (&d, rem) in next.remaining.iter_mut() {
            let Some(profile) = state.programmed.get(&d) else {
                continue; // nothing was planned, nothing was charged
            };
            let until = elapsed_end.min(d);
            let charged_kw: f64 = (prev..=until)
                .map(|slot| profile.get(slot - prev).copied().unwrap_or(0.0))
                .sum();
            *rem -= charged_kw * next.grid.slot_hours();
        }
    }
    next.programmed.clear();

    for (&d, &kwh) in &event.new_demands {
        *next.remaining.entry(d).or_insert(0.0) += kwh;
        next.seen_kwh += kwh;
    }

    let tol = next.zero_tol();
    for (&d, &rem) in &next.remaining {
        if d < event.arrival && rem > tol {
            return Err(OnlineError::InfeasiblePastDemand {
                departure: d,
                arrival: event.arrival,
                remaining_kwh: rem,
            });
        }
    }
    next.remaining.retain(|&d, rem| d >= event.arrival && *rem > tol);

    next.last_arrival = Some(event.arrival);
    Ok(next)
}

/// One departure group's planned profile at some event.
pub type GroupProfiles = BTreeMap<usize, Vec<f64>>;

/// Rebuild the forward plan at the current arrival slot: walk the
/// departure groups in increasing order, water-filling each one against
/// the baseline plus all groups already planned. Returns the updated
/// state, the per-group profiles over `[a, d]`, and the operator cost
/// over the whole horizon (frozen past slots contribute through the
/// realized log).
pub fn schedule_arrival(
    state: &OnlineState,
    f: &QuadraticCost,
) -> Result<(OnlineState, GroupProfiles, f64), OnlineError> {
    let arrival = state.last_arrival.ok_or(OnlineError::NoArrival)?;
    if state.remaining.is_empty() {
        return Err(OnlineError::NothingToSchedule { arrival });
    }

    let mut next = state.clone();
    let delta = next.grid.slot_hours();
    let t_max = next.grid.num_slots();

    // Fictitious forward baseline, growing as groups are stacked.
    let mut forward: Vec<f64> = next.baseline.as_slice()[arrival - 1..t_max].to_vec();
    let mut groups = GroupProfiles::new();
    for (&d, &need) in &next.remaining {
        let window = d - arrival + 1;
        let wf = water_fill(need, &forward[..window], delta)?;
        for (offset, &c) in wf.charge.iter().enumerate() {
            forward[offset] += c;
        }
        groups.insert(d, wf.charge);
    }

    let mut total = 0.0;
    for slot in 1..arrival {
        total += f.eval(next.baseline.at(slot) + next.realized[slot - 1]);
    }
    for &load in &forward {
        total += f.eval(load);
    }

    next.programmed = groups.clone();
    Ok((next, groups, total))
}

/// Record of one processed event.
#[derive(Debug, Clone)]
pub struct EventRecord {
    pub arrival: usize,
    /// Operator cost over the full horizon as seen at this event.
    pub cost: f64,
    /// Departure group -> planned power over `[arrival, d]`, kW.
    pub groups: GroupProfiles,
}

/// Outcome of a complete online run.
#[derive(Debug, Clone)]
pub struct OnlineTrace {
    /// Executed aggregate charging per slot, kW, full horizon.
    pub charging: Vec<f64>,
    /// Baseline plus charging per slot, kW.
    pub total_load: Vec<f64>,
    pub events: Vec<EventRecord>,
    /// Cost of the realized total load.
    pub final_cost: f64,
    /// Executed charging split by departure group, full horizon.
    pub group_charging: BTreeMap<usize, Vec<f64>>,
}

/// Run the whole horizon: fold every event through
/// [`advance_and_update`] and [`schedule_arrival`], then let the last
/// plan run to completion.
///
/// Events must be strictly increasing in arrival slot (merge same-slot
/// classes into one event first).
pub fn run_online(
    events: &[ArrivalEvent],
    baseline: &BaselineProfile,
    grid: &TimeGrid,
    f: &QuadraticCost,
) -> Result<OnlineTrace, OnlineError> {
    let mut state = OnlineState::new(grid.clone(), baseline.clone())?;
    let mut records = Vec::with_capacity(events.len());
    let mut expected_kwh = 0.0;

    for event in events {
        expected_kwh += event.new_demands.values().sum::<f64>();
        state = advance_and_update(&state, event)?;
        if state.remaining.is_empty() {
            // Every announced need is already covered; the cost is just
            // the horizon as currently frozen plus the bare baseline.
            let mut total = 0.0;
            for slot in 1..event.arrival {
                total += f.eval(state.baseline.at(slot) + state.realized[slot - 1]);
            }
            for slot in event.arrival..=grid.num_slots() {
                total += f.eval(state.baseline.at(slot));
            }
            records.push(EventRecord {
                arrival: event.arrival,
                cost: total,
                groups: GroupProfiles::new(),
            });
            continue;
        }
        let (next, groups, event_cost) = schedule_arrival(&state, f)?;
        state = next;
        records.push(EventRecord {
            arrival: event.arrival,
            cost: event_cost,
            groups,
        });
    }

    // Let the final plan execute to the end of the horizon.
    state.execute_through(grid.num_slots());

    let charging = state.realized.clone();
    let total_load: Vec<f64> = baseline
        .as_slice()
        .iter()
        .zip(&charging)
        .map(|(b, c)| b + c)
        .collect();
    let final_cost = cost(&total_load, f)?;

    let delivered_kwh = charging.iter().sum::<f64>() * grid.slot_hours();
    if (delivered_kwh - expected_kwh).abs() > 1e-8 * expected_kwh.max(1.0) {
        return Err(OnlineError::ConservationViolated {
            delivered_kwh,
            expected_kwh,
        });
    }

    Ok(OnlineTrace {
        charging,
        total_load,
        events: records,
        final_cost,
        group_charging: state.realized_by_group,
    })
}
