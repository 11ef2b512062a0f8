//! Server model state, response cache, aggregation triggers and the
//! averaging rules (plain FedAvg and staleness-weighted averaging).

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::model::ModelWeights;

/// Identifies a worker model within one server.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct WorkerId(pub u32);

impl fmt::Display for WorkerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "w{}", self.0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ServerModelState {
    pub version: u64,
    pub weights: ModelWeights,
}

impl ServerModelState {
    /// Fresh server model at version zero.
    pub fn new(weights: ModelWeights) -> Self {
        Self { version: 0, weights }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WorkerResponse {
    pub worker: WorkerId,
    /// Server version the worker fetched before training.
    pub base_version: u64,
    pub epochs: u32,
    pub weights: ModelWeights,
    pub data_count: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "a", rename_all = "snake_case")]
pub enum StalenessScheme {
    Linear,
    Polynomial(f64),
    Exponential(f64),
}

pub const DEFAULT_STALENESS_EXPONENT: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum AggregationPolicy {
    FedAvg,
    Weighted(StalenessScheme),
}

impl AggregationPolicy {
    pub fn validate(&self) -> Result<()> {
        match self {
            AggregationPolicy::Weighted(StalenessScheme::Polynomial(a))
            | AggregationPolicy::Weighted(StalenessScheme::Exponential(a))
                if !(*a > 0.0) || !a.is_finite() =>
            {
                invalid(format!("staleness exponent must be positive, got {a}"))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Sync,
    Async,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Trigger {
    Sync { min_responses: usize },
    Async,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Acceptance {
    Accept,
    RejectStale,
}

/// Raw weight for a response trained from version `base_version` when the
/// server is at `server_version`.
pub fn staleness_weight(scheme: StalenessScheme, server_version: u64, base_version: u64) -> Result<f64> {
    if base_version > server_version {
        return invalid(format!(
            "base version {base_version} is ahead of server version {server_version}"
        ));
    }
    let lag = (server_version - base_version) as f64;
    Ok(match scheme {
        StalenessScheme::Linear => 1.0 / (lag + 1.0),
        StalenessScheme::Polynomial(a) => (lag + 1.0).powf(-a),
        StalenessScheme::Exponential(a) => (-a * lag).exp(),
    })
}

/// Scales positive weights to sum to one.
pub fn normalize(raw: &[f64]) -> Result<Vec<f64>> {
    if raw.is_empty() {
        return invalid("cannot normalize an empty weight list");
    }
    if let Some(w) = raw.iter().find(|w| !(**w > 0.0) || !w.is_finite()) {
        return invalid(format!("weights must be positive and finite, got {w}"));
    }
    let total: f64 = raw.iter().sum();
    Ok(raw.iter().map(|w| w / total).collect())
}

fn canonical_order(a: &WorkerResponse, b: &WorkerResponse) -> Ordering {
    (a.worker, a.base_version, a.epochs, a.data_count)
        .cmp(&(b.worker, b.base_version, b.epochs, b.data_count))
        .then_with(|| {
            a.weights
                .values()
                .iter()
                .map(|v| v.to_bits())
                .cmp(b.weights.values().iter().map(|v| v.to_bits()))
        })
}

/// Merges responses into the next server model.
///
/// The mix is computed as `ref + Σ w_x (M_x - ref)` around the first
/// response in canonical order, so identical inputs come back bit-exact and
/// the result does not depend on the order responses arrived in.
pub fn aggregate(
    state: &ServerModelState,
    responses: &[WorkerResponse],
    policy: AggregationPolicy,
) -> Result<ServerModelState> {
    if responses.is_empty() {
        return invalid("aggregation needs at least one response");
    }
    policy.validate()?;
    for r in responses {
        if r.weights.shape() != state.weights.shape() {
            return invalid(format!(
                "response from {} has shape {:?}, server has {:?}",
                r.worker,
                r.weights.shape(),
                state.weights.shape()
            ));
        }
    }
    let mut ordered: Vec<&WorkerResponse> = responses.iter().collect();
    ordered.sort_by(|a, b| canonical_order(a, b));

    let mix = match policy {
        AggregationPolicy::FedAvg => vec![1.0 / ordered.len() as f64; ordered.len()],
        AggregationPolicy::Weighted(scheme) => {
            let raw = ordered
                .iter()
                .map(|r| staleness_weight(scheme, state.version, r.base_version))
                .collect::<Result<Vec<_>>>()?;
            normalize(&raw)?
        }
    };

    let reference = ordered[0].weights.values();
    let mut values = reference.to_vec();
    for (r, w) in ordered.iter().zip(&mix).skip(1) {
        for ((out, x), base) in values.iter_mut().zip(r.weights.values()).zip(reference) {
            *out += w * (x - base);
        }
    }
    let (nf, nc) = state.weights.shape();
    Ok(ServerModelState {
        version: state.version + 1,
        weights: ModelWeights::new(nf, nc, values)?,
    })
}

pub fn should_aggregate(trigger: Trigger, cache_size: usize) -> bool {
    match trigger {
        Trigger::Sync { min_responses } => cache_size >= min_responses.max(1),
        Trigger::Async => cache_size >= 1,
    }
}

/// Sync rounds accept only responses no aggregation has overtaken; async
/// accepts everything.
pub fn accept_response(mode: Mode, version_at_dispatch: u64, current_version: u64) -> Acceptance {
    match mode {
        Mode::Sync if version_at_dispatch != current_version => Acceptance::RejectStale,
        _ => Acceptance::Accept,
    }
}

/// Pending responses, newest one per worker.
#[derive(Clone, Debug, Default)]
pub struct ResponseCache {
    by_worker: BTreeMap<WorkerId, WorkerResponse>,
}

impl ResponseCache {
    pub fn insert(&mut self, response: WorkerResponse) {
        self.by_worker.insert(response.worker, response);
    }

    pub fn len(&self) -> usize {
        self.by_worker.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_worker.is_empty()
    }

    pub fn contains(&self, worker: WorkerId) -> bool {
        self.by_worker.contains_key(&worker)
    }

    pub fn responses(&self) -> impl Iterator<Item = &WorkerResponse> {
        self.by_worker.values()
    }

    /// Empties the cache, returning its contents in worker order.
    pub fn drain(&mut self) -> Vec<WorkerResponse> {
        std::mem::take(&mut self.by_worker).into_values().collect()
    }
}
