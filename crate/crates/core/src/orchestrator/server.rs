//! Aggregation server over TCP: adds workers, dispatches training,
//! collects weights through one-time credentials and aggregates.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use crate::aggregation::{Acceptance, AggregationPolicy, Mode, WorkerId, WorkerResponse};
use crate::error::{Error, Result};
use crate::model::{train_epochs, Dataset, ModelWeights, TrainConfig};
use crate::orchestrator::coordinator::{Coordinator, CoordinatorConfig, Dispatch, WorkerSeed};
use crate::orchestrator::endpoint::{BoundEndpoint, Endpoint, EndpointConfig, Messenger};
use crate::orchestrator::telemetry::RoundRecord;
use crate::protocol::blob::{blob_fetch, BlobService};
use crate::protocol::dispatch::Dispatcher;
use crate::protocol::frame::Message;
use crate::selection::{Selector, ServerProbe};
use crate::warehouse::{Address, DataId, ModelPointer, Warehouse};

/// Weight versions kept fetchable after they are superseded.
const KEPT_VERSIONS: usize = 4;

#[derive(Clone, Debug)]
pub struct ServerConfig {
    pub endpoint: EndpointConfig,
    pub mode: Mode,
    pub policy: AggregationPolicy,
    pub selector: Selector,
    /// Measured on this machine when unset.
    pub probe: Option<ServerProbe>,
    pub ready_timeout: Duration,
    /// Longest wait for any worker event before in-flight work is written off.
    pub round_timeout: Duration,
}

enum Event {
    Ready {
        worker: ModelPointer,
        data_count: u64,
        cpu_freq: f64,
        cpu_prop: f64,
    },
    TrainDone {
        worker: ModelPointer,
        epochs: u32,
        train_seconds: f64,
    },
    Refused {
        worker: ModelPointer,
        reason: String,
    },
    Weights {
        worker: ModelPointer,
        base_version: u64,
        bytes: Result<Vec<u8>>,
    },
}

struct Published {
    version: u64,
    id: DataId,
    history: VecDeque<DataId>,
}

struct Shared {
    pointer: ModelPointer,
    blobs: Arc<BlobService>,
    warehouse: Arc<Warehouse>,
    messenger: Messenger,
    current: Mutex<Published>,
    events: Mutex<Sender<Event>>,
}

struct Pending {
    epochs: u32,
    train_seconds: f64,
    done_at: Instant,
}

pub struct ServerRuntime {
    endpoint: Endpoint,
    shared: Arc<Shared>,
    coordinator: Coordinator,
    events: Receiver<Event>,
    workers: BTreeMap<WorkerId, ModelPointer>,
    ids: HashMap<ModelPointer, WorkerId>,
    pending: HashMap<WorkerId, Pending>,
    ready_timeout: Duration,
    round_timeout: Duration,
    started: Instant,
}

/// Seconds to train one sample once on this machine.
pub fn measure_t_onedata(sample_source: &Dataset, n_features: usize, n_classes: usize) -> Result<f64> {
    let one = sample_source.select(&[0]);
    let w = ModelWeights::zeros(n_features, n_classes)?;
    let epochs = 2000;
    let start = Instant::now();
    train_epochs(
        &w,
        &one,
        &TrainConfig {
            learning_rate: 0.1,
            epochs,
            rng_seed: 0,
        },
    )?;
    Ok((start.elapsed().as_secs_f64() / epochs as f64).max(1e-9))
}

impl ServerRuntime {
    pub fn start(cfg: ServerConfig, initial: ModelWeights, test: Dataset) -> Result<Self> {
        if test.is_empty() {
            return Err(Error::Config("the server needs a non-empty test set".into()));
        }
        let probe = match cfg.probe {
            Some(p) => p,
            None => ServerProbe {
                t_onedata: measure_t_onedata(&test, initial.n_features(), initial.n_classes())?,
                cpu_freq_server: 1.0,
            },
        };
        let bound = BoundEndpoint::bind(&cfg.endpoint)?;
        let weights_id = bound.warehouse.put_weights(&initial)?;
        let model_id = bound.warehouse.put_handle(Arc::new(()));
        let (tx, rx) = mpsc::channel();
        let shared = Arc::new(Shared {
            pointer: ModelPointer::new(bound.address.clone(), model_id),
            blobs: bound.blobs.clone(),
            warehouse: bound.warehouse.clone(),
            messenger: bound.messenger.clone(),
            current: Mutex::new(Published {
                version: 0,
                id: weights_id,
                history: VecDeque::new(),
            }),
            events: Mutex::new(tx),
        });
        let coordinator = Coordinator::new(
            initial,
            test,
            CoordinatorConfig {
                mode: cfg.mode,
                policy: cfg.policy,
                selector: cfg.selector,
                probe,
            },
        )?;
        let (s1, s2, s3) = (shared.clone(), shared.clone(), shared.clone());
        let dispatcher = Dispatcher::builder()
            .relationship(move |m| s1.on_relationship(m))
            .training(move |m| s2.on_training(m))
            .transfer(move |m| s3.on_transfer(m))
            .build()?;
        let endpoint = bound.serve(dispatcher)?;
        log::info!("server {} listening", shared.pointer);
        Ok(Self {
            endpoint,
            shared,
            coordinator,
            events: rx,
            workers: BTreeMap::new(),
            ids: HashMap::new(),
            pending: HashMap::new(),
            ready_timeout: cfg.ready_timeout,
            round_timeout: cfg.round_timeout,
            started: Instant::now(),
        })
    }

    pub fn pointer(&self) -> &ModelPointer {
        &self.shared.pointer
    }

    pub fn address(&self) -> &Address {
        &self.endpoint.address
    }

    pub fn coordinator(&self) -> &Coordinator {
        &self.coordinator
    }

    pub fn worker_pointers(&self) -> Vec<(WorkerId, ModelPointer)> {
        self.workers.iter().map(|(k, v)| (*k, v.clone())).collect()
    }

    fn now(&self) -> f64 {
        self.started.elapsed().as_secs_f64()
    }

    /// Runs the add-worker handshake against a worker host.
    pub fn add_worker(&mut self, address: &Address) -> Result<ModelPointer> {
        let sent_at = Instant::now();
        self.shared.messenger.send(
            address,
            &Message::AddWorkerRequest {
                server_pointer: self.shared.pointer.clone(),
            },
        )?;
        let deadline = sent_at + self.ready_timeout;
        loop {
            let left = deadline.saturating_duration_since(Instant::now());
            let ev = match self.events.recv_timeout(left) {
                Ok(ev) => ev,
                Err(RecvTimeoutError::Timeout) => {
                    return Err(Error::RoundAborted(format!(
                        "{address} did not report ready in time"
                    )))
                }
                Err(RecvTimeoutError::Disconnected) => {
                    return Err(Error::RoundAborted("event channel closed".into()))
                }
            };
            match ev {
                Event::Ready {
                    worker,
                    data_count,
                    cpu_freq,
                    cpu_prop,
                } => {
                    if self.ids.contains_key(&worker) {
                        continue;
                    }
                    let id = self.coordinator.register_worker(WorkerSeed {
                        cpu_freq,
                        cpu_prop,
                        data_count,
                        t_transmit: sent_at.elapsed().as_secs_f64(),
                    })?;
                    log::info!("registered {id} at {worker} holding {data_count} samples");
                    self.workers.insert(id, worker.clone());
                    self.ids.insert(worker.clone(), id);
                    return Ok(worker);
                }
                other => self.handle(other)?,
            }
        }
    }

    fn send_dispatches(&mut self, dispatches: Vec<Dispatch>) {
        for d in dispatches {
            let Some(worker) = self.workers.get(&d.worker).cloned() else {
                continue;
            };
            let msg = Message::TrainRequest {
                worker_pointer: worker.clone(),
                server_pointer: self.shared.pointer.clone(),
                epochs: d.epochs,
                server_version: d.server_version,
            };
            if let Err(e) = self.shared.messenger.send(&worker.address, &msg) {
                log::warn!("could not dispatch {}: {e}", d.worker);
                self.coordinator.worker_failed(d.worker);
            }
        }
    }

    fn handle(&mut self, ev: Event) -> Result<()> {
        match ev {
            Event::Ready { worker, .. } => {
                log::debug!("repeated readiness from {worker}");
            }
            Event::TrainDone {
                worker,
                epochs,
                train_seconds,
            } => {
                let Some(&id) = self.ids.get(&worker) else {
                    return Ok(());
                };
                if self.coordinator.on_train_done(id) == Acceptance::RejectStale {
                    log::debug!("ignoring stale result from {id}");
                    return Ok(());
                }
                self.pending.insert(
                    id,
                    Pending {
                        epochs,
                        train_seconds,
                        done_at: Instant::now(),
                    },
                );
                let fetch = Message::FetchRequest {
                    target_pointer: worker.clone(),
                    requester_pointer: self.shared.pointer.clone(),
                };
                if let Err(e) = self.shared.messenger.send(&worker.address, &fetch) {
                    log::warn!("could not request weights from {id}: {e}");
                    self.pending.remove(&id);
                    self.coordinator.worker_failed(id);
                }
            }
            Event::Refused { worker, reason } => {
                if let Some(&id) = self.ids.get(&worker) {
                    log::info!("{id} refused training: {reason}");
                    self.coordinator.worker_failed(id);
                }
            }
            Event::Weights {
                worker,
                base_version,
                bytes,
            } => {
                let Some(&id) = self.ids.get(&worker) else {
                    return Ok(());
                };
                let Some(p) = self.pending.remove(&id) else {
                    return Ok(());
                };
                let data_count = self.coordinator.profile(id).map(|p| p.data_count).unwrap_or(0);
                let response =
                    bytes
                        .and_then(|b| ModelWeights::from_bytes(&b))
                        .map(|weights| WorkerResponse {
                            worker: id,
                            base_version,
                            epochs: p.epochs,
                            weights,
                            data_count,
                        });
                let delivered = response.and_then(|r| {
                    let transmit = p.done_at.elapsed().as_secs_f64();
                    self.coordinator.deliver(r, Some((p.train_seconds, transmit)))
                });
                if let Err(e) = delivered {
                    log::warn!("dropping weights from {id}: {e}");
                    self.coordinator.worker_failed(id);
                }
            }
        }
        Ok(())
    }

    /// Writes off every in-flight worker after a silent timeout.
    fn expire_busy(&mut self) {
        for id in self.coordinator.busy_workers() {
            log::warn!("{id} timed out");
            self.pending.remove(&id);
            self.coordinator.worker_failed(id);
        }
    }

    fn publish(&mut self) -> Result<()> {
        let id = self.shared.warehouse.put_weights(self.coordinator.weights())?;
        let mut cur = self.shared.current.lock().unwrap();
        let old = std::mem::replace(&mut cur.id, id);
        cur.version = self.coordinator.version();
        cur.history.push_back(old);
        while cur.history.len() > KEPT_VERSIONS {
            if let Some(gone) = cur.history.pop_front() {
                self.shared.warehouse.delete(&gone);
            }
        }
        Ok(())
    }

    /// One synchronous round: select, dispatch, wait for the quota,
    /// aggregate and evaluate.
    pub fn run_sync_round(&mut self) -> Result<RoundRecord> {
        if self.coordinator.mode() != Mode::Sync {
            return Err(Error::InvalidArgument("server is in async mode".into()));
        }
        let dispatches = self.coordinator.begin_sync_round(self.now())?;
        self.send_dispatches(dispatches);
        while !self.coordinator.sync_round_complete() {
            match self.events.recv_timeout(self.round_timeout) {
                Ok(ev) => self.handle(ev)?,
                Err(RecvTimeoutError::Timeout) => self.expire_busy(),
                Err(RecvTimeoutError::Disconnected) => break,
            }
        }
        let record = self.coordinator.finish_sync_round(self.now())?;
        self.publish()?;
        log::info!(
            "round {} accuracy {:.4} from {} responses",
            record.round_index,
            record.accuracy,
            record.responses_used
        );
        Ok(record)
    }

    /// Keeps the selected workers busy and aggregates whenever weights are
    /// waiting, until `rounds` more aggregations have happened.
    pub fn run_async_loop(&mut self, rounds: usize) -> Result<Vec<RoundRecord>> {
        if self.coordinator.mode() != Mode::Async {
            return Err(Error::InvalidArgument("server is in sync mode".into()));
        }
        let mut out = Vec::new();
        let first = self.coordinator.start_async(self.now())?;
        self.send_dispatches(first);
        while out.len() < rounds {
            match self.events.recv_timeout(self.round_timeout) {
                Ok(ev) => self.handle(ev)?,
                Err(RecvTimeoutError::Timeout) => self.expire_busy(),
                Err(RecvTimeoutError::Disconnected) => break,
            }
            // Everything already queued joins this aggregation.
            while let Ok(ev) = self.events.try_recv() {
                self.handle(ev)?;
            }
            if self.coordinator.async_ready() {
                let (record, next) = self.coordinator.aggregate_async(self.now())?;
                self.publish()?;
                log::info!(
                    "async aggregation {} accuracy {:.4} from {} responses",
                    record.round_index,
                    record.accuracy,
                    record.responses_used
                );
                out.push(record);
                if out.len() < rounds {
                    self.send_dispatches(next);
                } else {
                    for d in next {
                        self.coordinator.worker_failed(d.worker);
                    }
                }
            } else if self.coordinator.busy_workers().is_empty() {
                let next = self.coordinator.dispatch_idle(self.now())?;
                self.send_dispatches(next);
            }
        }
        Ok(out)
    }

    pub fn stop(&mut self) {
        self.endpoint.stop();
    }
}

impl Shared {
    fn post(&self, ev: Event) {
        let _ = self.events.lock().unwrap().send(ev);
    }

    fn on_relationship(&self, msg: Message) -> Result<()> {
        match msg {
            Message::WorkerReady {
                worker_pointer,
                server_pointer,
                data_count,
                cpu_freq,
                cpu_prop,
            } if server_pointer == self.pointer => self.post(Event::Ready {
                worker: worker_pointer,
                data_count,
                cpu_freq,
                cpu_prop,
            }),
            other => log::debug!("server ignores {other:?}"),
        }
        Ok(())
    }

    fn on_training(&self, msg: Message) -> Result<()> {
        match msg {
            Message::TrainDone {
                worker_pointer,
                server_pointer,
                epochs_trained,
                train_seconds,
                ..
            } if server_pointer == self.pointer => self.post(Event::TrainDone {
                worker: worker_pointer,
                epochs: epochs_trained,
                train_seconds,
            }),
            Message::TrainRefused {
                worker_pointer,
                server_pointer,
                reason,
            } if server_pointer == self.pointer => self.post(Event::Refused {
                worker: worker_pointer,
                reason,
            }),
            other => log::debug!("server ignores {other:?}"),
        }
        Ok(())
    }

    fn on_transfer(&self, msg: Message) -> Result<()> {
        match msg {
            Message::FetchRequest {
                target_pointer,
                requester_pointer,
            } if target_pointer == self.pointer => {
                let (id, version) = {
                    let cur = self.current.lock().unwrap();
                    (cur.id, cur.version)
                };
                let credential = self.blobs.offer(&id)?;
                let to = requester_pointer.address.clone();
                self.messenger.send(
                    &to,
                    &Message::FetchCredential {
                        credential,
                        target_pointer,
                        requester_pointer,
                        server_version: version,
                    },
                )
            }
            Message::FetchCredential {
                credential,
                target_pointer,
                requester_pointer,
                server_version,
            } if requester_pointer == self.pointer => {
                let bytes = blob_fetch(&credential);
                self.post(Event::Weights {
                    worker: target_pointer,
                    base_version: server_version,
                    bytes,
                });
                Ok(())
            }
            other => {
                log::debug!("server ignores {other:?}");
                Ok(())
            }
        }
    }
}
