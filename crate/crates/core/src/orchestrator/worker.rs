//! Worker host: holds one or more worker models, each bound to the server
//! that created it, and trains them on request.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use crate::error::{Error, Result};
use crate::model::{train_epochs, Dataset, ModelWeights, TrainConfig};
use crate::orchestrator::endpoint::{BoundEndpoint, Endpoint, EndpointConfig, Messenger};
use crate::protocol::blob::{blob_fetch, BlobService, TransferCredential};
use crate::protocol::dispatch::Dispatcher;
use crate::protocol::frame::Message;
use crate::sim::mix;
use crate::warehouse::{Address, DataId, ModelPointer, Warehouse};

#[derive(Clone, Debug)]
pub struct WorkerHostConfig {
    pub endpoint: EndpointConfig,
    /// The k-th model a server creates here trains on shard k. Models beyond
    /// the last shard are empty and never train.
    pub shards: Vec<Dataset>,
    pub n_features: usize,
    pub n_classes: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Reported to the server for its time estimate.
    pub cpu_freq: f64,
    pub cpu_prop: f64,
    /// When positive, training is padded to take at least
    /// `samples * epochs * unit_cost * speed_class` seconds.
    pub unit_cost: f64,
    pub speed_class: f64,
}

/// Marker stored in the warehouse for each live worker model.
struct WorkerModel;

struct Slot {
    index: u64,
    server: ModelPointer,
    shard: Arc<Dataset>,
    weights_id: DataId,
    base_version: u64,
    busy: bool,
    pending_epochs: u32,
    trainings: u64,
}

struct HostState {
    address: Address,
    warehouse: Arc<Warehouse>,
    blobs: Arc<BlobService>,
    messenger: Messenger,
    cfg: WorkerHostConfig,
    slots: Mutex<HashMap<DataId, Slot>>,
}

pub struct WorkerHost {
    endpoint: Endpoint,
    state: Arc<HostState>,
}

impl WorkerHost {
    pub fn start(cfg: WorkerHostConfig) -> Result<Self> {
        if cfg.learning_rate <= 0.0 || cfg.cpu_freq <= 0.0 || !(cfg.cpu_prop > 0.0 && cfg.cpu_prop <= 1.0) {
            return Err(Error::Config(
                "learning_rate, cpu_freq and cpu_prop must be positive".into(),
            ));
        }
        if cfg.speed_class <= 0.0 || cfg.unit_cost < 0.0 {
            return Err(Error::Config(
                "speed_class must be positive and unit_cost non-negative".into(),
            ));
        }
        let bound = BoundEndpoint::bind(&cfg.endpoint)?;
        let state = Arc::new(HostState {
            address: bound.address.clone(),
            warehouse: bound.warehouse.clone(),
            blobs: bound.blobs.clone(),
            messenger: bound.messenger.clone(),
            cfg,
            slots: Mutex::new(HashMap::new()),
        });
        let (s1, s2, s3) = (state.clone(), state.clone(), state.clone());
        let dispatcher = Dispatcher::builder()
            .relationship(move |m| s1.on_relationship(m))
            .training(move |m| s2.on_training(m))
            .transfer(move |m| s3.on_transfer(m))
            .build()?;
        let endpoint = bound.serve(dispatcher)?;
        log::info!("worker host listening on {}", endpoint.address);
        Ok(Self { endpoint, state })
    }

    pub fn address(&self) -> &Address {
        &self.endpoint.address
    }

    pub fn model_count(&self) -> usize {
        self.state.slots.lock().unwrap().len()
    }

    /// Pointers of the hosted models and the server each belongs to.
    pub fn models(&self) -> Vec<(ModelPointer, ModelPointer)> {
        let slots = self.state.slots.lock().unwrap();
        let mut out: Vec<_> = slots
            .iter()
            .map(|(id, s)| {
                (
                    s.index,
                    ModelPointer::new(self.state.address.clone(), *id),
                    s.server.clone(),
                )
            })
            .collect();
        out.sort_by_key(|(i, _, _)| *i);
        out.into_iter().map(|(_, a, b)| (a, b)).collect()
    }

    /// Total completed training jobs across hosted models.
    pub fn trainings(&self) -> u64 {
        self.state
            .slots
            .lock()
            .unwrap()
            .values()
            .map(|s| s.trainings)
            .sum()
    }

    pub fn stop(&mut self) {
        self.endpoint.stop();
    }
}

impl HostState {
    fn pointer(&self, id: DataId) -> ModelPointer {
        ModelPointer::new(self.address.clone(), id)
    }

    fn on_relationship(&self, msg: Message) -> Result<()> {
        let Message::AddWorkerRequest { server_pointer } = msg else {
            log::debug!("worker host ignores {msg:?}");
            return Ok(());
        };
        let weights = ModelWeights::zeros(self.cfg.n_features, self.cfg.n_classes)?;
        let weights_id = self.warehouse.put_weights(&weights)?;
        let id = self.warehouse.put_handle(Arc::new(WorkerModel));
        let data_count = {
            let mut slots = self.slots.lock().unwrap();
            let k = slots.values().filter(|s| s.server == server_pointer).count();
            let shard = self.cfg.shards.get(k).cloned();
            let shard = shard.unwrap_or_else(|| Dataset::empty(self.cfg.n_features, self.cfg.n_classes));
            let data_count = shard.len() as u64;
            let index = slots.len() as u64;
            slots.insert(
                id,
                Slot {
                    index,
                    server: server_pointer.clone(),
                    shard: Arc::new(shard),
                    weights_id,
                    base_version: 0,
                    busy: false,
                    pending_epochs: 0,
                    trainings: 0,
                },
            );
            data_count
        };
        log::info!("created worker model {id} for {server_pointer} with {data_count} samples");
        let to = server_pointer.address.clone();
        self.messenger.send(
            &to,
            &Message::WorkerReady {
                worker_pointer: self.pointer(id),
                server_pointer,
                data_count,
                cpu_freq: self.cfg.cpu_freq,
                cpu_prop: self.cfg.cpu_prop,
            },
        )
    }

    fn refuse(&self, worker_pointer: ModelPointer, server_pointer: ModelPointer, reason: &str) -> Result<()> {
        log::info!("refusing training of {worker_pointer} for {server_pointer}: {reason}");
        let to = server_pointer.address.clone();
        self.messenger.send(
            &to,
            &Message::TrainRefused {
                worker_pointer,
                server_pointer,
                reason: reason.to_string(),
            },
        )
    }

    fn on_training(&self, msg: Message) -> Result<()> {
        let Message::TrainRequest {
            worker_pointer,
            server_pointer,
            epochs,
            ..
        } = msg
        else {
            log::debug!("worker host ignores {msg:?}");
            return Ok(());
        };
        let verdict = {
            let mut slots = self.slots.lock().unwrap();
            match slots.get_mut(&worker_pointer.id) {
                None => Err("unknown worker model"),
                Some(s) if s.server != server_pointer => Err("not this model's server"),
                Some(s) if s.busy => Err("busy"),
                Some(s) if s.shard.is_empty() => Err("no training data"),
                Some(_) if epochs == 0 => Err("zero epochs"),
                Some(s) => {
                    s.busy = true;
                    s.pending_epochs = epochs;
                    Ok(())
                }
            }
        };
        if let Err(reason) = verdict {
            return self.refuse(worker_pointer, server_pointer, reason);
        }
        let to = server_pointer.address.clone();
        let sent = self.messenger.send(
            &to,
            &Message::FetchRequest {
                target_pointer: server_pointer,
                requester_pointer: worker_pointer.clone(),
            },
        );
        if sent.is_err() {
            self.release(&worker_pointer.id);
        }
        sent
    }

    fn release(&self, id: &DataId) {
        if let Some(s) = self.slots.lock().unwrap().get_mut(id) {
            s.busy = false;
        }
    }

    fn on_transfer(self: &Arc<Self>, msg: Message) -> Result<()> {
        match msg {
            Message::FetchRequest {
                target_pointer,
                requester_pointer,
            } => {
                let (weights_id, version) = {
                    let slots = self.slots.lock().unwrap();
                    match slots.get(&target_pointer.id) {
                        Some(s) if s.server == requester_pointer => (s.weights_id, s.base_version),
                        _ => {
                            log::warn!("{requester_pointer} may not fetch {target_pointer}");
                            return Ok(());
                        }
                    }
                };
                let credential = self.blobs.offer(&weights_id)?;
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
            } => {
                let job = {
                    let slots = self.slots.lock().unwrap();
                    match slots.get(&requester_pointer.id) {
                        Some(s) if s.busy && s.server == target_pointer => {
                            Some((s.shard.clone(), s.pending_epochs, s.index, s.trainings))
                        }
                        _ => None,
                    }
                };
                let Some((shard, epochs, index, trainings)) = job else {
                    log::warn!("unexpected credential for {requester_pointer}");
                    return Ok(());
                };
                // Training runs off the listener thread so messages keep flowing.
                let state = self.clone();
                thread::Builder::new()
                    .name(format!("train-{index}"))
                    .spawn(move || {
                        let job = TrainJob {
                            credential,
                            server: target_pointer,
                            worker: requester_pointer,
                            server_version,
                            shard,
                            epochs,
                            seed: mix(state.cfg.seed, index, trainings),
                        };
                        let worker = job.worker.clone();
                        if let Err(e) = state.train(job) {
                            log::warn!("training {worker} failed: {e}");
                            state.release(&worker.id);
                        }
                    })?;
                Ok(())
            }
            other => {
                log::debug!("worker host ignores {other:?}");
                Ok(())
            }
        }
    }

    fn train(&self, job: TrainJob) -> Result<()> {
        let started = Instant::now();
        let bytes = blob_fetch(&job.credential)?;
        let base = ModelWeights::from_bytes(&bytes)?;
        let trained = train_epochs(
            &base,
            &job.shard,
            &TrainConfig {
                learning_rate: self.cfg.learning_rate,
                epochs: job.epochs as usize,
                rng_seed: job.seed,
            },
        )?;
        if self.cfg.unit_cost > 0.0 {
            let target =
                job.shard.len() as f64 * job.epochs as f64 * self.cfg.unit_cost * self.cfg.speed_class;
            let spent = started.elapsed().as_secs_f64();
            if target > spent {
                thread::sleep(Duration::from_secs_f64(target - spent));
            }
        }
        let train_seconds = started.elapsed().as_secs_f64();
        {
            let mut slots = self.slots.lock().unwrap();
            let slot = slots
                .get_mut(&job.worker.id)
                .ok_or_else(|| Error::NotFound(job.worker.to_string()))?;
            self.warehouse
                .replace_bytes(&slot.weights_id, &trained.to_bytes())?;
            slot.base_version = job.server_version;
            slot.busy = false;
            slot.trainings += 1;
        }
        self.messenger.send(
            &job.server.address,
            &Message::TrainDone {
                worker_pointer: job.worker,
                server_pointer: job.server.clone(),
                server_version: job.server_version,
                epochs_trained: job.epochs,
                train_seconds,
            },
        )
    }
}

struct TrainJob {
    credential: TransferCredential,
    server: ModelPointer,
    worker: ModelPointer,
    server_version: u64,
    shard: Arc<Dataset>,
    epochs: u32,
    seed: u64,
}
