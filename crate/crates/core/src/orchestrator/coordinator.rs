//! The aggregation server's state machine, independent of transport.
//!
//! Both the TCP runtime and the virtual-clock simulator drive a
//! [`Coordinator`]: they ask it whom to dispatch, tell it when training
//! finishes and weights arrive, and let it decide when to aggregate.

use std::collections::{BTreeMap, BTreeSet};

use crate::aggregation::{
    accept_response, aggregate, should_aggregate, Acceptance, AggregationPolicy, Mode, ResponseCache,
    ServerModelState, Trigger, WorkerId, WorkerResponse,
};
use crate::error::{Error, Result};
use crate::model::{evaluate, Dataset, ModelWeights};
use crate::orchestrator::telemetry::RoundRecord;
use crate::selection::{estimate_t_one, refine_profile, Selector, ServerProbe, WorkerProfile};

/// What a worker reports about itself when it joins.
#[derive(Clone, Debug, PartialEq)]
pub struct WorkerSeed {
    pub cpu_freq: f64,
    pub cpu_prop: f64,
    pub data_count: u64,
    /// Measured or assumed weights round-trip time.
    pub t_transmit: f64,
}

/// Instruction to start training one worker.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dispatch {
    pub worker: WorkerId,
    pub epochs: u32,
    pub server_version: u64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum WorkerStatus {
    Idle,
    Busy {
        dispatch_version: u64,
        epochs: u32,
        dispatched_at: f64,
    },
}

/// A response that went into an aggregation.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConsumedResponse {
    pub round: u64,
    pub worker: WorkerId,
    pub base_version: u64,
    pub dispatch_version: u64,
    /// Server version the aggregation started from.
    pub aggregated_at_version: u64,
}

#[derive(Clone, Debug)]
struct WorkerEntry {
    profile: WorkerProfile,
    status: WorkerStatus,
}

#[derive(Clone, Debug)]
struct SyncRound {
    started_at: f64,
    selected: BTreeSet<WorkerId>,
    expected: usize,
}

#[derive(Clone, Debug)]
pub struct CoordinatorConfig {
    pub mode: Mode,
    pub policy: AggregationPolicy,
    pub selector: Selector,
    pub probe: ServerProbe,
}

pub struct Coordinator {
    state: ServerModelState,
    workers: BTreeMap<WorkerId, WorkerEntry>,
    next_worker: u32,
    cache: ResponseCache,
    mode: Mode,
    policy: AggregationPolicy,
    selector: Selector,
    probe: ServerProbe,
    test: Dataset,
    accuracy: f64,
    records: Vec<RoundRecord>,
    consumed: Vec<ConsumedResponse>,
    sync_round: Option<SyncRound>,
    async_since: f64,
    dispatch_log: BTreeMap<WorkerId, u64>,
}

impl Coordinator {
    pub fn new(initial: ModelWeights, test: Dataset, config: CoordinatorConfig) -> Result<Self> {
        config.policy.validate()?;
        config.selector.validate()?;
        let accuracy = evaluate(&initial, &test)?;
        Ok(Self {
            state: ServerModelState::new(initial),
            workers: BTreeMap::new(),
            next_worker: 1,
            cache: ResponseCache::default(),
            mode: config.mode,
            policy: config.policy,
            selector: config.selector,
            probe: config.probe,
            test,
            accuracy,
            records: Vec::new(),
            consumed: Vec::new(),
            sync_round: None,
            async_since: 0.0,
            dispatch_log: BTreeMap::new(),
        })
    }

    pub fn register_worker(&mut self, seed: WorkerSeed) -> Result<WorkerId> {
        let id = WorkerId(self.next_worker);
        let mut profile = WorkerProfile {
            worker: id,
            t_one: 0.0,
            t_transmit: seed.t_transmit,
            cpu_freq: seed.cpu_freq,
            cpu_prop: seed.cpu_prop,
            data_count: seed.data_count,
        };
        if seed.data_count > 0 {
            profile.t_one = estimate_t_one(&self.probe, &profile)?;
        }
        self.next_worker += 1;
        self.workers.insert(
            id,
            WorkerEntry {
                profile,
                status: WorkerStatus::Idle,
            },
        );
        Ok(id)
    }

    pub fn state(&self) -> &ServerModelState {
        &self.state
    }

    pub fn version(&self) -> u64 {
        self.state.version
    }

    pub fn weights(&self) -> &ModelWeights {
        &self.state.weights
    }

    pub fn accuracy(&self) -> f64 {
        self.accuracy
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn records(&self) -> &[RoundRecord] {
        &self.records
    }

    pub fn consumed(&self) -> &[ConsumedResponse] {
        &self.consumed
    }

    pub fn selector(&self) -> &Selector {
        &self.selector
    }

    pub fn worker_count(&self) -> usize {
        self.workers.len()
    }

    pub fn profiles(&self) -> Vec<WorkerProfile> {
        self.workers.values().map(|e| e.profile.clone()).collect()
    }

    pub fn profile(&self, worker: WorkerId) -> Option<&WorkerProfile> {
        self.workers.get(&worker).map(|e| &e.profile)
    }

    pub fn status(&self, worker: WorkerId) -> Option<WorkerStatus> {
        self.workers.get(&worker).map(|e| e.status)
    }

    pub fn busy_workers(&self) -> Vec<WorkerId> {
        self.workers
            .iter()
            .filter(|(_, e)| matches!(e.status, WorkerStatus::Busy { .. }))
            .map(|(id, _)| *id)
            .collect()
    }

    pub fn in_sync_round(&self) -> bool {
        self.sync_round.is_some()
    }

    pub fn cache_len(&self) -> usize {
        self.cache.len()
    }

    /// Runs the selector, letting its update rule fire on unchanged accuracy
    /// while the selection is empty (a zero time budget opens this way).
    fn select_nonempty(&mut self) -> Result<BTreeSet<WorkerId>> {
        let profiles = self.profiles();
        for _ in 0..=profiles.len() + 1 {
            let selected = self.selector.select(&profiles)?;
            if !selected.is_empty() {
                return Ok(selected);
            }
            let before = self.selector.clone();
            self.selector.update(&profiles, self.accuracy, self.accuracy);
            if self.selector == before {
                break;
            }
        }
        Err(Error::RoundAborted("no selectable worker".into()))
    }

    fn mark_dispatched(&mut self, workers: &BTreeSet<WorkerId>, now: f64) -> Vec<Dispatch> {
        let profiles = self.profiles();
        let mut out = Vec::new();
        for w in workers {
            let Some(entry) = self.workers.get(w) else {
                continue;
            };
            if entry.status != WorkerStatus::Idle {
                continue;
            }
            let epochs = self.selector.epochs_for(&entry.profile, &profiles);
            self.workers.get_mut(w).unwrap().status = WorkerStatus::Busy {
                dispatch_version: self.state.version,
                epochs,
                dispatched_at: now,
            };
            self.dispatch_log.insert(*w, self.state.version);
            out.push(Dispatch {
                worker: *w,
                epochs,
                server_version: self.state.version,
            });
        }
        out
    }

    /// Opens a synchronous round and returns the workers to dispatch.
    pub fn begin_sync_round(&mut self, now: f64) -> Result<Vec<Dispatch>> {
        if self.sync_round.is_some() {
            return Err(Error::InvalidArgument("a round is already in progress".into()));
        }
        let selected = self.select_nonempty()?;
        let dispatches = self.mark_dispatched(&selected, now);
        if dispatches.is_empty() {
            return Err(Error::RoundAborted("every selected worker is busy".into()));
        }
        self.sync_round = Some(SyncRound {
            started_at: now,
            expected: dispatches.len(),
            selected,
        });
        Ok(dispatches)
    }

    /// Decides whether a finished worker's weights should be fetched.
    pub fn on_train_done(&mut self, worker: WorkerId) -> Acceptance {
        let Some(entry) = self.workers.get_mut(&worker) else {
            return Acceptance::RejectStale;
        };
        let WorkerStatus::Busy { dispatch_version, .. } = entry.status else {
            return Acceptance::RejectStale;
        };
        let in_round = match (&self.mode, &self.sync_round) {
            (Mode::Sync, Some(r)) => r.selected.contains(&worker),
            (Mode::Sync, None) => false,
            (Mode::Async, _) => true,
        };
        let verdict = if in_round {
            accept_response(self.mode, dispatch_version, self.state.version)
        } else {
            Acceptance::RejectStale
        };
        if verdict == Acceptance::RejectStale {
            entry.status = WorkerStatus::Idle;
        }
        verdict
    }

    /// Hands over a worker's trained weights. `observed` carries the train
    /// and transmit seconds the round actually took, when known.
    pub fn deliver(&mut self, response: WorkerResponse, observed: Option<(f64, f64)>) -> Result<()> {
        let worker = response.worker;
        let entry = self
            .workers
            .get_mut(&worker)
            .ok_or_else(|| Error::NotFound(format!("worker {worker}")))?;
        if let Some((train, transmit)) = observed {
            if train > 0.0 {
                entry.profile =
                    refine_profile(&entry.profile, train, transmit.max(0.0), response.epochs.max(1))?;
            }
        }
        entry.status = WorkerStatus::Idle;
        if response.weights.shape() != self.state.weights.shape() {
            return Err(Error::InvalidArgument(format!(
                "{worker} sent weights of the wrong shape"
            )));
        }
        if response.base_version > self.state.version {
            return Err(Error::InvalidArgument(format!(
                "{worker} claims a future base version"
            )));
        }
        self.cache.insert(response);
        Ok(())
    }

    /// A dispatched worker refused or was lost; its slot in the round is dropped.
    pub fn worker_failed(&mut self, worker: WorkerId) {
        if let Some(e) = self.workers.get_mut(&worker) {
            e.status = WorkerStatus::Idle;
        }
        if let Some(r) = &mut self.sync_round {
            if r.selected.contains(&worker) && !self.cache.contains(worker) {
                r.expected = r.expected.saturating_sub(1);
            }
        }
    }

    pub fn trigger(&self) -> Trigger {
        match (&self.mode, &self.sync_round) {
            (Mode::Sync, Some(r)) => Trigger::Sync {
                min_responses: r.expected,
            },
            (Mode::Sync, None) => Trigger::Sync {
                min_responses: usize::MAX,
            },
            (Mode::Async, _) => Trigger::Async,
        }
    }

    /// True once the synchronous quota is in (or nothing is left to wait for).
    pub fn sync_round_complete(&self) -> bool {
        match &self.sync_round {
            Some(r) => r.expected == 0 || should_aggregate(self.trigger(), self.cache.len()),
            None => false,
        }
    }

    fn merge(
        &mut self,
        started_at: f64,
        finished_at: f64,
        selected: BTreeSet<WorkerId>,
    ) -> Result<RoundRecord> {
        let responses = self.cache.drain();
        let next = aggregate(&self.state, &responses, self.policy)?;
        let acc_prev = self.accuracy;
        let acc_now = evaluate(&next.weights, &self.test)?;
        for r in &responses {
            self.consumed.push(ConsumedResponse {
                round: next.version,
                worker: r.worker,
                base_version: r.base_version,
                dispatch_version: self
                    .dispatch_log
                    .get(&r.worker)
                    .copied()
                    .unwrap_or(r.base_version),
                aggregated_at_version: self.state.version,
            });
        }
        self.state = next;
        self.accuracy = acc_now;
        let record = RoundRecord {
            round_index: self.state.version,
            started_at,
            finished_at: finished_at.max(started_at),
            accuracy: acc_now,
            selected,
            responses_used: responses.len(),
        };
        self.records.push(record.clone());
        let profiles = self.profiles();
        self.selector.update(&profiles, acc_prev, acc_now);
        Ok(record)
    }

    /// Closes the synchronous round. With no usable response the round is
    /// aborted and the server model is left untouched.
    pub fn finish_sync_round(&mut self, now: f64) -> Result<RoundRecord> {
        let round = self
            .sync_round
            .take()
            .ok_or_else(|| Error::InvalidArgument("no round in progress".into()))?;
        for w in &round.selected {
            if let Some(e) = self.workers.get_mut(w) {
                e.status = WorkerStatus::Idle;
            }
        }
        if self.cache.is_empty() {
            return Err(Error::RoundAborted("no selected worker returned weights".into()));
        }
        self.merge(round.started_at, now, round.selected)
    }

    /// Dispatches every selected worker that is idle. Used to start the
    /// asynchronous loop and to recover when nothing is in flight.
    pub fn dispatch_idle(&mut self, now: f64) -> Result<Vec<Dispatch>> {
        let selected = if self.busy_workers().is_empty() {
            self.select_nonempty()?
        } else {
            self.selector.select(&self.profiles())?
        };
        Ok(self.mark_dispatched(&selected, now))
    }

    pub fn start_async(&mut self, now: f64) -> Result<Vec<Dispatch>> {
        self.async_since = now;
        self.dispatch_idle(now)
    }

    pub fn async_ready(&self) -> bool {
        self.mode == Mode::Async && should_aggregate(Trigger::Async, self.cache.len())
    }

    /// Aggregates whatever is cached, then re-dispatches the responders that
    /// are still selected along with any newly admitted idle workers.
    pub fn aggregate_async(&mut self, now: f64) -> Result<(RoundRecord, Vec<Dispatch>)> {
        if self.cache.is_empty() {
            return Err(Error::InvalidArgument("nothing cached to aggregate".into()));
        }
        let responders: BTreeSet<WorkerId> = self.cache.responses().map(|r| r.worker).collect();
        let started = self.async_since;
        self.async_since = now;
        let record = self.merge(started, now, responders)?;
        let dispatches = self.dispatch_idle(now)?;
        Ok((record, dispatches))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::aggregation::StalenessScheme;
    use crate::model::{init_weights, synth_dataset};
    use crate::selection::{SelectionPolicy, TimeBasedState};

    fn coordinator(mode: Mode, policy: SelectionPolicy) -> Coordinator {
        let test = synth_dataset(4, 10, 0.2, 1).unwrap();
        let init = init_weights(test.n_features(), 4, 1).unwrap();
        let mut c = Coordinator::new(
            init,
            test,
            CoordinatorConfig {
                mode,
                policy: AggregationPolicy::Weighted(StalenessScheme::Linear),
                selector: Selector::new(policy, 3),
                probe: ServerProbe {
                    t_onedata: 0.01,
                    cpu_freq_server: 1.0,
                },
            },
        )
        .unwrap();
        for (freq, n) in [(1.0, 100), (0.5, 100), (0.1, 100)] {
            c.register_worker(WorkerSeed {
                cpu_freq: freq,
                cpu_prop: 1.0,
                data_count: n,
                t_transmit: 0.5,
            })
            .unwrap();
        }
        c
    }

    fn response(c: &Coordinator, worker: WorkerId, base: u64, fill: f64) -> WorkerResponse {
        let (nf, nc) = c.weights().shape();
        WorkerResponse {
            worker,
            base_version: base,
            epochs: 3,
            weights: ModelWeights::new(nf, nc, vec![fill; (nf + 1) * nc]).unwrap(),
            data_count: 100,
        }
    }

    #[test]
    fn estimates_profiles_on_registration() {
        let c = coordinator(Mode::Sync, SelectionPolicy::All);
        let t: Vec<f64> = c.profiles().iter().map(|p| p.t_one).collect();
        assert!((t[0] - 1.0).abs() < 1e-12 && (t[1] - 2.0).abs() < 1e-12 && (t[2] - 10.0).abs() < 1e-12);
    }

    #[test]
    fn zero_budget_opens_on_first_round() {
        let mut c = coordinator(
            Mode::Sync,
            SelectionPolicy::TimeBased(TimeBasedState {
                r: 3,
                ..Default::default()
            }),
        );
        let d = c.begin_sync_round(0.0).unwrap();
        assert_eq!(d.len(), 1);
        assert_eq!(d[0].worker, WorkerId(1));
        assert_eq!(c.version(), 0);
    }

    #[test]
    fn sync_round_rejects_stale_and_aggregates() {
        let mut c = coordinator(Mode::Sync, SelectionPolicy::All);
        let d = c.begin_sync_round(0.0).unwrap();
        assert_eq!(d.len(), 3);
        for w in [WorkerId(1), WorkerId(2), WorkerId(3)] {
            assert_eq!(c.on_train_done(w), Acceptance::Accept);
            let r = response(&c, w, 0, w.0 as f64);
            c.deliver(r, None).unwrap();
        }
        assert!(c.sync_round_complete());
        let rec = c.finish_sync_round(5.0).unwrap();
        assert_eq!(rec.round_index, 1);
        assert_eq!(rec.responses_used, 3);
        assert!(c.weights().values().iter().all(|v| (v - 2.0).abs() < 1e-12));
        // A leftover TrainDone from round 0 is now stale.
        assert_eq!(c.on_train_done(WorkerId(1)), Acceptance::RejectStale);
    }

    #[test]
    fn failed_round_leaves_state_untouched() {
        let mut c = coordinator(Mode::Sync, SelectionPolicy::All);
        let before = c.weights().clone();
        c.begin_sync_round(0.0).unwrap();
        for w in [WorkerId(1), WorkerId(2), WorkerId(3)] {
            c.worker_failed(w);
        }
        assert!(c.sync_round_complete());
        assert!(matches!(c.finish_sync_round(1.0), Err(Error::RoundAborted(_))));
        assert_eq!(c.version(), 0);
        assert_eq!(
            c.weights()
                .values()
                .iter()
                .map(|v| v.to_bits())
                .collect::<Vec<_>>(),
            before.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        assert!(c.records().is_empty());
    }

    #[test]
    fn async_accepts_stale_and_redispatches_responder() {
        let mut c = coordinator(Mode::Async, SelectionPolicy::All);
        let d = c.start_async(0.0).unwrap();
        assert_eq!(d.len(), 3);
        c.on_train_done(WorkerId(1));
        c.deliver(response(&c, WorkerId(1), 0, 1.0), None).unwrap();
        let (rec, again) = c.aggregate_async(1.0).unwrap();
        assert_eq!(rec.round_index, 1);
        assert_eq!(again.len(), 1);
        assert_eq!(again[0].worker, WorkerId(1));
        assert_eq!(again[0].server_version, 1);
        assert_eq!(c.on_train_done(WorkerId(3)), Acceptance::Accept);
        c.deliver(response(&c, WorkerId(3), 0, 3.0), None).unwrap();
        let (rec, _) = c.aggregate_async(2.0).unwrap();
        assert_eq!(rec.round_index, 2);
        assert_eq!(c.consumed().last().unwrap().base_version, 0);
        assert_eq!(c.consumed().last().unwrap().aggregated_at_version, 1);
    }
}
