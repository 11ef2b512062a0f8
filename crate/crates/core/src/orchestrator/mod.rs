//! Server and worker roles.

pub mod coordinator;
pub mod endpoint;
pub mod server;
pub mod telemetry;
pub mod worker;

pub use coordinator::{ConsumedResponse, Coordinator, CoordinatorConfig, Dispatch, WorkerSeed, WorkerStatus};
pub use endpoint::{EndpointConfig, FrameTap, Messenger, TapDirection};
pub use server::{ServerConfig, ServerRuntime};
pub use telemetry::{export_consumed, export_records, parse_records, RoundRecord};
pub use worker::{WorkerHost, WorkerHostConfig};
