//! Discrete-event execution of the coordinator on a virtual clock.
//!
//! Training is real SGD on real shards; only durations are synthetic. A
//! shard of `n` samples trained for `e` epochs costs
//! `n * e * unit_cost * speed_class` virtual seconds, and each weights round
//! trip costs the worker's `transmit_delay`.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap};

use serde::{Deserialize, Serialize};

use crate::aggregation::{Acceptance, AggregationPolicy, Mode, WorkerId, WorkerResponse};
use crate::error::{invalid, Error, Result};
use crate::model::{
    init_weights, partition, synth_dataset, train_epochs, AllocationRow, Dataset, TrainConfig,
};
use crate::orchestrator::coordinator::{
    ConsumedResponse, Coordinator, CoordinatorConfig, Dispatch, WorkerSeed,
};
use crate::orchestrator::telemetry::RoundRecord;
use crate::selection::{SelectionPolicy, Selector, ServerProbe};

pub const DEFAULT_UNIT_COST: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimMode {
    Sync,
    Async,
    /// One worker holds every batch; run as synchronous rounds.
    Sequential,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimWorkerSpec {
    /// Multiplier on the reference training time.
    pub speed_class: f64,
    pub transmit_delay: f64,
    /// Batches of training data allocated to this worker.
    pub batches: usize,
}

/// Synthetic task the workers learn.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub n_classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub spread: f64,
    pub dataset_seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub name: String,
    pub workers: Vec<SimWorkerSpec>,
    pub selector: SelectionPolicy,
    pub policy: AggregationPolicy,
    pub mode: SimMode,
    /// Aggregations to run.
    pub rounds: usize,
    /// Epochs per dispatch (r).
    pub epochs: u32,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub unit_cost: f64,
    pub task: TaskSpec,
    pub target_accuracy: f64,
}

impl ScenarioConfig {
    pub fn allocation(&self) -> AllocationRow {
        AllocationRow::new(self.workers.iter().map(|w| w.batches).collect(), self.batch_size)
    }

    pub fn validate(&self) -> Result<()> {
        if self.workers.is_empty() {
            return invalid("scenario needs at least one worker");
        }
        for (i, w) in self.workers.iter().enumerate() {
            if !(w.speed_class > 0.0) || !w.speed_class.is_finite() {
                return invalid(format!("worker {} speed_class must be positive", i + 1));
            }
            if !(w.transmit_delay >= 0.0) || !w.transmit_delay.is_finite() {
                return invalid(format!("worker {} transmit_delay must be >= 0", i + 1));
            }
        }
        if self.workers.iter().all(|w| w.batches == 0) {
            return invalid("no worker holds any data");
        }
        if self.mode == SimMode::Sequential && self.workers.iter().filter(|w| w.batches > 0).count() != 1 {
            return invalid("sequential mode needs exactly one worker holding all batches");
        }
        if self.rounds == 0 || self.epochs == 0 || self.batch_size == 0 {
            return invalid("rounds, epochs and batch_size must be at least 1");
        }
        if !(self.learning_rate > 0.0) || !(self.unit_cost > 0.0) {
            return invalid("learning_rate and unit_cost must be positive");
        }
        let available = self.task.n_classes * self.task.train_per_class;
        if self.allocation().required_samples() > available {
            return invalid(format!(
                "allocation needs {} samples but the task has {available}",
                self.allocation().required_samples()
            ));
        }
        if self.task.test_per_class == 0 {
            return invalid("test set must not be empty");
        }
        self.policy.validate()?;
        Selector::new(self.selector.clone(), self.epochs).validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum EventKind {
    TrainComplete,
    TransferComplete,
}

#[derive(Clone, Debug)]
struct SimEvent {
    due: f64,
    seq: u64,
    kind: EventKind,
    worker: WorkerId,
}

impl PartialEq for SimEvent {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for SimEvent {}

impl PartialOrd for SimEvent {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for SimEvent {
    // Reversed so the max-heap pops the earliest (due, seq) first.
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .due
            .total_cmp(&self.due)
            .then_with(|| other.seq.cmp(&self.seq))
    }
}

/// Monotone simulated time driven by an event queue.
#[derive(Default)]
struct EventQueue {
    now: f64,
    seq: u64,
    heap: BinaryHeap<SimEvent>,
}

impl EventQueue {
    fn schedule(&mut self, delay: f64, kind: EventKind, worker: WorkerId) {
        self.seq += 1;
        self.heap.push(SimEvent {
            due: self.now + delay,
            seq: self.seq,
            kind,
            worker,
        });
    }

    fn pop(&mut self) -> Option<SimEvent> {
        let ev = self.heap.pop()?;
        debug_assert!(ev.due >= self.now);
        self.now = ev.due;
        Some(ev)
    }

    fn next_due(&self) -> Option<f64> {
        self.heap.peek().map(|e| e.due)
    }
}

struct SimWorker {
    spec: SimWorkerSpec,
    shard: Dataset,
    pending: Option<WorkerResponse>,
    train_seconds: f64,
    dispatches: u64,
}

/// Everything a scenario run produced.
#[derive(Clone, Debug)]
pub struct SimOutcome {
    pub records: Vec<RoundRecord>,
    pub consumed: Vec<ConsumedResponse>,
    pub final_version: u64,
    /// Ceiling reached, or the reason the run stopped early.
    pub stopped: Option<String>,
}

pub(crate) fn mix(seed: u64, a: u64, b: u64) -> u64 {
    // splitmix64 over the three inputs.
    let mut z = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub struct Simulation {
    cfg: ScenarioConfig,
    seed: u64,
    coordinator: Coordinator,
    workers: BTreeMap<WorkerId, SimWorker>,
    queue: EventQueue,
}

impl Simulation {
    pub fn new(cfg: &ScenarioConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let task = &cfg.task;
        let train = synth_dataset(
            task.n_classes,
            task.train_per_class,
            task.spread,
            task.dataset_seed,
        )?;
        let test = synth_dataset(
            task.n_classes,
            task.test_per_class,
            task.spread,
            task.dataset_seed.wrapping_add(0x7E57),
        )?;
        let shards = partition(&train, &cfg.allocation(), mix(seed, 1, 0))?;
        let init = init_weights(train.n_features(), task.n_classes, mix(seed, 2, 0))?;

        let (mode, selector) = match cfg.mode {
            SimMode::Sync => (Mode::Sync, cfg.selector.clone()),
            SimMode::Async => (Mode::Async, cfg.selector.clone()),
            SimMode::Sequential => (Mode::Sync, SelectionPolicy::All),
        };
        let selector = match selector {
            SelectionPolicy::Random { k, seed: s } => SelectionPolicy::Random {
                k,
                seed: mix(seed, 3, s),
            },
            other => other,
        };
        let mut coordinator = Coordinator::new(
            init,
            test,
            CoordinatorConfig {
                mode,
                policy: cfg.policy,
                selector: Selector::new(selector, cfg.epochs),
                probe: ServerProbe {
                    t_onedata: cfg.unit_cost,
                    cpu_freq_server: 1.0,
                },
            },
        )?;
        let mut workers = BTreeMap::new();
        for (spec, shard) in cfg.workers.iter().zip(shards) {
            let id = coordinator.register_worker(WorkerSeed {
                cpu_freq: 1.0 / spec.speed_class,
                cpu_prop: 1.0,
                data_count: shard.len() as u64,
                t_transmit: spec.transmit_delay,
            })?;
            workers.insert(
                id,
                SimWorker {
                    spec: spec.clone(),
                    shard,
                    pending: None,
                    train_seconds: 0.0,
                    dispatches: 0,
                },
            );
        }
        Ok(Self {
            cfg: cfg.clone(),
            seed,
            coordinator,
            workers,
            queue: EventQueue::default(),
        })
    }

    pub fn coordinator(&self) -> &Coordinator {
        &self.coordinator
    }

    fn dispatch(&mut self, dispatches: Vec<Dispatch>) -> Result<()> {
        for d in dispatches {
            let worker = self
                .workers
                .get_mut(&d.worker)
                .ok_or_else(|| Error::NotFound(format!("worker {}", d.worker)))?;
            worker.dispatches += 1;
            let cfg = TrainConfig {
                learning_rate: self.cfg.learning_rate,
                epochs: d.epochs as usize,
                rng_seed: mix(self.seed, 4 + d.worker.0 as u64, worker.dispatches),
            };
            let weights = train_epochs(self.coordinator.weights(), &worker.shard, &cfg)?;
            worker.train_seconds =
                worker.shard.len() as f64 * d.epochs as f64 * self.cfg.unit_cost * worker.spec.speed_class;
            worker.pending = Some(WorkerResponse {
                worker: d.worker,
                base_version: d.server_version,
                epochs: d.epochs,
                weights,
                data_count: worker.shard.len() as u64,
            });
            self.queue
                .schedule(worker.train_seconds, EventKind::TrainComplete, d.worker);
        }
        Ok(())
    }

    fn handle(&mut self, ev: SimEvent) -> Result<()> {
        match ev.kind {
            EventKind::TrainComplete => {
                if self.coordinator.on_train_done(ev.worker) == Acceptance::Accept {
                    let delay = self.workers[&ev.worker].spec.transmit_delay;
                    self.queue.schedule(delay, EventKind::TransferComplete, ev.worker);
                } else if let Some(w) = self.workers.get_mut(&ev.worker) {
                    w.pending = None;
                }
            }
            EventKind::TransferComplete => {
                let w = self.workers.get_mut(&ev.worker).unwrap();
                let response = w.pending.take().expect("transfer without training");
                let observed = (w.train_seconds, w.spec.transmit_delay);
                self.coordinator.deliver(response, Some(observed))?;
            }
        }
        Ok(())
    }

    /// Runs until `rounds` aggregations have happened or no progress is
    /// possible.
    pub fn run(mut self) -> Result<SimOutcome> {
        let now = self.queue.now;
        let first = match self.coordinator.mode() {
            Mode::Sync => self.coordinator.begin_sync_round(now)?,
            Mode::Async => self.coordinator.start_async(now)?,
        };
        self.dispatch(first)?;
        let mut stopped = None;

        while (self.coordinator.records().len()) < self.cfg.rounds {
            let Some(ev) = self.queue.pop() else {
                stopped = Some("event queue drained".to_string());
                break;
            };
            self.handle(ev)?;
            // Settle only once every event of this instant is in.
            if self.queue.next_due() == Some(self.queue.now) {
                continue;
            }
            let now = self.queue.now;
            let next = match self.coordinator.mode() {
                Mode::Sync if self.coordinator.sync_round_complete() => {
                    match self.coordinator.finish_sync_round(now) {
                        Ok(_) | Err(Error::RoundAborted(_)) => {}
                        Err(e) => return Err(e),
                    }
                    if self.coordinator.records().len() >= self.cfg.rounds {
                        break;
                    }
                    self.coordinator.begin_sync_round(now)
                }
                Mode::Async if self.coordinator.async_ready() => {
                    self.coordinator.aggregate_async(now).map(|(_, d)| d)
                }
                Mode::Async if self.coordinator.busy_workers().is_empty() => {
                    self.coordinator.dispatch_idle(now)
                }
                _ => Ok(Vec::new()),
            };
            match next {
                Ok(d) => self.dispatch(d)?,
                Err(Error::RoundAborted(why)) => {
                    stopped = Some(why);
                    break;
                }
                Err(e) => return Err(e),
            }
        }
        Ok(SimOutcome {
            final_version: self.coordinator.version(),
            records: self.coordinator.records().to_vec(),
            consumed: self.coordinator.consumed().to_vec(),
            stopped,
        })
    }
}

pub fn run_scenario(cfg: &ScenarioConfig, seed: u64) -> Result<Vec<RoundRecord>> {
    Ok(Simulation::new(cfg, seed)?.run()?.records)
}

/// Virtual time at which accuracy first reaches `target`.
pub fn time_to_accuracy(records: &[RoundRecord], target: f64) -> Option<f64> {
    records
        .iter()
        .find(|r| r.accuracy >= target)
        .map(|r| r.finished_at)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ComparisonRow {
    pub scenario: String,
    pub seed: u64,
    pub time_to_accuracy: Option<f64>,
    pub final_accuracy: f64,
    pub rounds: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Speedup {
    pub scenario: String,
    pub baseline: String,
    /// Mean over seeds of `tta(scenario) / tta(baseline)`; below 1 means
    /// `scenario` reached the target sooner.
    pub ratio: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Comparison {
    pub rows: Vec<ComparisonRow>,
    pub speedups: Vec<Speedup>,
}

impl Comparison {
    pub fn speedup(&self, scenario: &str, baseline: &str) -> Option<f64> {
        let ratios: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.scenario == scenario)
            .filter_map(|a| {
                let b = self
                    .rows
                    .iter()
                    .find(|b| b.scenario == baseline && b.seed == a.seed)?;
                Some(a.time_to_accuracy? / b.time_to_accuracy?)
            })
            .collect();
        if ratios.is_empty() {
            None
        } else {
            Some(ratios.iter().sum::<f64>() / ratios.len() as f64)
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("scenario,seed,time_to_accuracy,final_accuracy,rounds\n");
        for r in &self.rows {
            let tta = r
                .time_to_accuracy
                .map_or("unreached".to_string(), |t| t.to_string());
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.scenario,
                r.seed,
                tta,
                crate::orchestrator::telemetry::format_accuracy(r.final_accuracy),
                r.rounds
            ));
        }
        out.push_str("\nscenario,baseline,mean_time_ratio\n");
        for s in &self.speedups {
            let ratio = s.ratio.map_or("n/a".to_string(), |r| format!("{r:.6}"));
            out.push_str(&format!("{},{},{}\n", s.scenario, s.baseline, ratio));
        }
        out
    }
}

pub fn summarize(name: &str, seed: u64, records: &[RoundRecord], target: f64) -> ComparisonRow {
    ComparisonRow {
        scenario: name.to_string(),
        seed,
        time_to_accuracy: time_to_accuracy(records, target),
        final_accuracy: records.last().map_or(0.0, |r| r.accuracy),
        rounds: records.len(),
    }
}

/// Runs every scenario under every seed and tabulates time-to-accuracy.
pub fn compare_runs(scenarios: &[ScenarioConfig], seeds: &[u64]) -> Result<Comparison> {
    if scenarios.len() < 2 {
        return invalid("comparison needs at least two scenarios");
    }
    let mut rows = Vec::new();
    for cfg in scenarios {
        for &seed in seeds {
            let records = run_scenario(cfg, seed)?;
            rows.push(summarize(&cfg.name, seed, &records, cfg.target_accuracy));
        }
    }
    Ok(comparison_from_rows(
        rows,
        scenarios.iter().map(|s| s.name.clone()).collect(),
    ))
}

pub fn comparison_from_rows(rows: Vec<ComparisonRow>, names: Vec<String>) -> Comparison {
    let mut cmp = Comparison {
        rows,
        speedups: Vec::new(),
    };
    for a in &names {
        for b in &names {
            if a != b {
                let ratio = cmp.speedup(a, b);
                cmp.speedups.push(Speedup {
                    scenario: a.clone(),
                    baseline: b.clone(),
                    ratio,
                });
            }
        }
    }
    cmp
}
