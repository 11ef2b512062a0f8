//! Federated learning runtime: a reference softmax model, ID-keyed model
//! storage, a topic-framed wire protocol with one-time-token weight
//! transfer, synchronous and staleness-weighted asynchronous aggregation,
//! heuristic worker selection, and a virtual-clock simulator.

pub mod aggregation;
pub mod clock;
pub mod config;
pub mod error;
pub mod idx;
pub mod model;
pub mod orchestrator;
pub mod protocol;
pub mod scenarios;
pub mod selection;
pub mod sim;
pub mod warehouse;

pub use error::{Error, Result};
