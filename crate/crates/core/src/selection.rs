//! Worker selection: take-all, random-k, the r-min/r-max window heuristic
//! and the training-time-budget heuristic, plus training-time estimation.

use std::collections::BTreeSet;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::aggregation::WorkerId;
use crate::error::{invalid, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorkerProfile {
    pub worker: WorkerId,
    /// Seconds for one epoch over the worker's whole shard.
    pub t_one: f64,
    /// Seconds for one weights round trip.
    pub t_transmit: f64,
    /// GHz.
    pub cpu_freq: f64,
    /// Fraction of the CPU available for training, in (0, 1].
    pub cpu_prop: f64,
    pub data_count: u64,
}

/// Timing of one training sample on the server.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ServerProbe {
    pub t_onedata: f64,
    pub cpu_freq_server: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RMinMaxState {
    pub rmin: f64,
    pub rmax: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeBasedState {
    pub r: u32,
    pub t_budget: f64,
    pub threshold_a: f64,
}

pub const DEFAULT_EPOCHS_PER_ROUND: u32 = 10;
pub const DEFAULT_THRESHOLD_A: f64 = 0.005;

impl Default for TimeBasedState {
    fn default() -> Self {
        Self {
            r: DEFAULT_EPOCHS_PER_ROUND,
            t_budget: 0.0,
            threshold_a: DEFAULT_THRESHOLD_A,
        }
    }
}

/// Scales the server's one-sample time by the server/worker effective
/// frequency ratio and by the worker's sample count.
pub fn estimate_t_one(probe: &ServerProbe, profile: &WorkerProfile) -> Result<f64> {
    let positive = [
        ("t_onedata", probe.t_onedata),
        ("cpu_freq_server", probe.cpu_freq_server),
        ("cpu_freq", profile.cpu_freq),
        ("cpu_prop", profile.cpu_prop),
    ];
    for (name, v) in positive {
        if !(v > 0.0) || !v.is_finite() {
            return invalid(format!("{name} must be positive, got {v}"));
        }
    }
    if profile.cpu_prop > 1.0 {
        return invalid(format!("cpu_prop must be at most 1, got {}", profile.cpu_prop));
    }
    if profile.data_count == 0 {
        return invalid("data_count must be positive");
    }
    Ok(
        probe.t_onedata * probe.cpu_freq_server / (profile.cpu_freq * profile.cpu_prop)
            * profile.data_count as f64,
    )
}

fn window(p: &WorkerProfile, epochs: f64) -> f64 {
    p.t_one * epochs + p.t_transmit
}

/// Deadline of the r-min/r-max window: the fastest worker's time to run
/// `rmax` epochs.
pub fn rminmax_deadline(profiles: &[WorkerProfile], state: &RMinMaxState) -> Option<f64> {
    profiles
        .iter()
        .map(|p| window(p, state.rmax))
        .min_by(f64::total_cmp)
}

/// Keeps every worker able to finish `rmin` epochs before the fastest worker
/// finishes `rmax`. The fastest worker is always kept.
pub fn select_rminmax(profiles: &[WorkerProfile], state: &RMinMaxState) -> BTreeSet<WorkerId> {
    let Some(deadline) = rminmax_deadline(profiles, state) else {
        return BTreeSet::new();
    };
    let mut selected: BTreeSet<WorkerId> = profiles
        .iter()
        .filter(|p| window(p, state.rmin) <= deadline)
        .map(|p| p.worker)
        .collect();
    if let Some(fastest) = profiles
        .iter()
        .filter(|p| window(p, state.rmax) == deadline)
        .map(|p| p.worker)
        .min()
    {
        selected.insert(fastest);
    }
    selected
}

/// Widens the window as accuracy rises: `rmin` shrinks and `rmax` grows by
/// the ratio of the one-shifted accuracies.
pub fn update_rminmax(state: &RMinMaxState, acc_prev: f64, acc_now: f64) -> RMinMaxState {
    let up = (acc_now + 1.0) / (acc_prev + 1.0);
    RMinMaxState {
        rmin: state.rmin / up,
        rmax: state.rmax * up,
    }
}

pub fn total_time(p: &WorkerProfile, r: u32) -> f64 {
    window(p, r as f64)
}

pub fn select_timebased(profiles: &[WorkerProfile], state: &TimeBasedState) -> BTreeSet<WorkerId> {
    profiles
        .iter()
        .filter(|p| total_time(p, state.r) <= state.t_budget)
        .map(|p| p.worker)
        .collect()
}

/// Raises the budget to admit the next-fastest unselected worker when the
/// accuracy gain falls below the threshold.
pub fn update_timebased(
    state: &TimeBasedState,
    unselected: &[WorkerProfile],
    acc_prev: f64,
    acc_now: f64,
) -> TimeBasedState {
    let mut next = *state;
    if acc_now - acc_prev < state.threshold_a {
        if let Some(t) = unselected
            .iter()
            .map(|p| total_time(p, state.r))
            .min_by(f64::total_cmp)
        {
            next.t_budget = t;
        }
    }
    next
}

pub fn select_random(workers: &[WorkerId], k: usize, seed: u64) -> Result<BTreeSet<WorkerId>> {
    if k > workers.len() {
        return invalid(format!("cannot pick {k} of {} workers", workers.len()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(index::sample(&mut rng, workers.len(), k)
        .into_iter()
        .map(|i| workers[i])
        .collect())
}

/// Replaces the estimates with what the last round actually took.
pub fn refine_profile(
    profile: &WorkerProfile,
    observed_train_seconds: f64,
    observed_transmit_seconds: f64,
    epochs_trained: u32,
) -> Result<WorkerProfile> {
    if epochs_trained == 0 {
        return invalid("epochs_trained must be at least 1");
    }
    if !(observed_train_seconds > 0.0) || observed_transmit_seconds < 0.0 {
        return invalid("observed times must be positive");
    }
    Ok(WorkerProfile {
        t_one: observed_train_seconds / epochs_trained as f64,
        t_transmit: observed_transmit_seconds,
        ..profile.clone()
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum SelectionPolicy {
    All,
    Random { k: usize, seed: u64 },
    RMinMax(RMinMaxState),
    TimeBased(TimeBasedState),
}

/// A selection policy plus the epochs each dispatched worker trains.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Selector {
    pub policy: SelectionPolicy,
    pub epochs: u32,
    draws: u64,
}

impl Selector {
    pub fn new(policy: SelectionPolicy, epochs: u32) -> Self {
        let epochs = match &policy {
            SelectionPolicy::TimeBased(s) => s.r,
            _ => epochs,
        };
        Self {
            policy,
            epochs,
            draws: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return invalid("epochs per round must be at least 1");
        }
        match &self.policy {
            SelectionPolicy::RMinMax(s) if !(s.rmin > 0.0 && s.rmax > 0.0) => {
                invalid("rmin and rmax must be positive")
            }
            SelectionPolicy::TimeBased(s) if s.r == 0 || s.t_budget < 0.0 || !(s.threshold_a > 0.0) => {
                invalid("time-based selection needs r >= 1, budget >= 0 and threshold > 0")
            }
            _ => Ok(()),
        }
    }

    /// Picks workers among `profiles`, skipping those without data.
    pub fn select(&mut self, profiles: &[WorkerProfile]) -> Result<BTreeSet<WorkerId>> {
        let eligible: Vec<WorkerProfile> = profiles.iter().filter(|p| p.data_count > 0).cloned().collect();
        Ok(match &self.policy {
            SelectionPolicy::All => eligible.iter().map(|p| p.worker).collect(),
            SelectionPolicy::Random { k, seed } => {
                let ids: Vec<WorkerId> = eligible.iter().map(|p| p.worker).collect();
                let draw = seed.wrapping_add(self.draws);
                self.draws += 1;
                select_random(&ids, (*k).min(ids.len()), draw)?
            }
            SelectionPolicy::RMinMax(s) => select_rminmax(&eligible, s),
            SelectionPolicy::TimeBased(s) => select_timebased(&eligible, s),
        })
    }

    /// Epochs to ask of `worker`. Under the r-min/r-max window a worker runs
    /// as many epochs as fit before the deadline, clamped to `[rmin, rmax]`.
    pub fn epochs_for(&self, worker: &WorkerProfile, pool: &[WorkerProfile]) -> u32 {
        match &self.policy {
            SelectionPolicy::RMinMax(s) => {
                let eligible: Vec<WorkerProfile> =
                    pool.iter().filter(|p| p.data_count > 0).cloned().collect();
                let lo = s.rmin.min(s.rmax).ceil().max(1.0);
                let hi = s.rmax.max(s.rmin).floor().max(lo);
                let fit = match rminmax_deadline(&eligible, s) {
                    Some(d) if worker.t_one > 0.0 => ((d - worker.t_transmit) / worker.t_one).floor(),
                    _ => lo,
                };
                fit.clamp(lo, hi) as u32
            }
            _ => self.epochs,
        }
    }

    /// Applies the policy's update rule after an aggregation round.
    pub fn update(&mut self, profiles: &[WorkerProfile], acc_prev: f64, acc_now: f64) {
        match &mut self.policy {
            SelectionPolicy::RMinMax(s) => *s = update_rminmax(s, acc_prev, acc_now),
            SelectionPolicy::TimeBased(s) => {
                let eligible: Vec<WorkerProfile> =
                    profiles.iter().filter(|p| p.data_count > 0).cloned().collect();
                let chosen = select_timebased(&eligible, s);
                let unselected: Vec<WorkerProfile> = eligible
                    .into_iter()
                    .filter(|p| !chosen.contains(&p.worker))
                    .collect();
                *s = update_timebased(s, &unselected, acc_prev, acc_now);
            }
            SelectionPolicy::All | SelectionPolicy::Random { .. } => {}
        }
    }

    pub fn name(&self) -> &'static str {
        match self.policy {
            SelectionPolicy::All => "all",
            SelectionPolicy::Random { .. } => "random",
            SelectionPolicy::RMinMax(_) => "rminmax",
            SelectionPolicy::TimeBased(_) => "timebased",
        }
    }
}
