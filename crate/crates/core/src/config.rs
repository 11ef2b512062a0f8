//! TOML configuration for participants and simulation scenarios.
//!
//! A participant file describes one process: where it listens, which data it
//! holds and, for a server, whom to recruit and how to aggregate.
//!
//! ```toml
//! role = "server"            # or "worker"
//! host = "127.0.0.1"
//! port = 7000                # 0 picks a free port
//! blob_port = 0
//!
//! [task]
//! n_classes = 10
//! train_per_class = 100
//! test_per_class = 100
//! spread = 0.3
//! dataset_seed = 3
//! batch_size = 10
//! allocation = [1, 1, 1]     # batches per worker slot
//!
//! [train]
//! learning_rate = 0.1
//! epochs = 10
//! seed = 1
//!
//! [server]
//! workers = ["127.0.0.1:7001", "127.0.0.1:7002"]
//! mode = "sync"              # or "async"
//! rounds = 10
//! selector = { kind = "timebased", threshold_a = 0.005 }
//! policy = { kind = "weighted", scheme = "polynomial", a = 0.5 }
//!
//! [worker]
//! shards = [0]               # allocation slots this host serves, in order
//! speed_class = 1.0
//! unit_cost = 0.0
//! ```
//!
//! Scenario files use the same `task`, `selector` and `policy` tables plus
//! one `[[workers]]` entry per simulated worker with `speed_class`,
//! `transmit_delay` and `batches`.

use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::aggregation::{AggregationPolicy, Mode, StalenessScheme, DEFAULT_STALENESS_EXPONENT};
use crate::error::{Error, Result};
use crate::idx::load_idx;
use crate::model::{partition, synth_dataset, AllocationRow, Dataset, DEFAULT_BATCH_SIZE};
use crate::protocol::blob::DEFAULT_TTL_SECS;
use crate::selection::{
    RMinMaxState, SelectionPolicy, Selector, ServerProbe, TimeBasedState, DEFAULT_EPOCHS_PER_ROUND,
    DEFAULT_THRESHOLD_A,
};
use crate::sim::{ScenarioConfig, SimMode, SimWorkerSpec, TaskSpec, DEFAULT_UNIT_COST};

fn config_err(e: impl std::fmt::Display) -> Error {
    Error::Config(e.to_string())
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SelectorSpec {
    All,
    Random {
        k: usize,
        #[serde(default)]
        seed: u64,
    },
    Rminmax {
        rmin: f64,
        rmax: f64,
    },
    Timebased {
        #[serde(default = "default_threshold")]
        threshold_a: f64,
        #[serde(default)]
        t_budget: f64,
    },
}

fn default_threshold() -> f64 {
    DEFAULT_THRESHOLD_A
}

impl SelectorSpec {
    pub fn to_policy(&self, epochs: u32) -> SelectionPolicy {
        match *self {
            SelectorSpec::All => SelectionPolicy::All,
            SelectorSpec::Random { k, seed } => SelectionPolicy::Random { k, seed },
            SelectorSpec::Rminmax { rmin, rmax } => SelectionPolicy::RMinMax(RMinMaxState { rmin, rmax }),
            SelectorSpec::Timebased {
                threshold_a,
                t_budget,
            } => SelectionPolicy::TimeBased(TimeBasedState {
                r: epochs,
                t_budget,
                threshold_a,
            }),
        }
    }

    pub fn from_policy(policy: &SelectionPolicy) -> Self {
        match *policy {
            SelectionPolicy::All => SelectorSpec::All,
            SelectionPolicy::Random { k, seed } => SelectorSpec::Random { k, seed },
            SelectionPolicy::RMinMax(s) => SelectorSpec::Rminmax {
                rmin: s.rmin,
                rmax: s.rmax,
            },
            SelectionPolicy::TimeBased(s) => SelectorSpec::Timebased {
                threshold_a: s.threshold_a,
                t_budget: s.t_budget,
            },
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchemeName {
    Linear,
    Polynomial,
    Exponential,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PolicySpec {
    Fedavg,
    Weighted {
        scheme: SchemeName,
        #[serde(default = "default_exponent")]
        a: f64,
    },
}

fn default_exponent() -> f64 {
    DEFAULT_STALENESS_EXPONENT
}

impl PolicySpec {
    pub fn to_policy(&self) -> AggregationPolicy {
        match *self {
            PolicySpec::Fedavg => AggregationPolicy::FedAvg,
            PolicySpec::Weighted { scheme, a } => AggregationPolicy::Weighted(match scheme {
                SchemeName::Linear => StalenessScheme::Linear,
                SchemeName::Polynomial => StalenessScheme::Polynomial(a),
                SchemeName::Exponential => StalenessScheme::Exponential(a),
            }),
        }
    }

    pub fn from_policy(policy: AggregationPolicy) -> Self {
        match policy {
            AggregationPolicy::FedAvg => PolicySpec::Fedavg,
            AggregationPolicy::Weighted(StalenessScheme::Linear) => PolicySpec::Weighted {
                scheme: SchemeName::Linear,
                a: DEFAULT_STALENESS_EXPONENT,
            },
            AggregationPolicy::Weighted(StalenessScheme::Polynomial(a)) => PolicySpec::Weighted {
                scheme: SchemeName::Polynomial,
                a,
            },
            AggregationPolicy::Weighted(StalenessScheme::Exponential(a)) => PolicySpec::Weighted {
                scheme: SchemeName::Exponential,
                a,
            },
        }
    }
}

/// Paths to IDX files used instead of synthetic data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdxFiles {
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    pub test_images: PathBuf,
    pub test_labels: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    #[serde(default = "d_classes")]
    pub n_classes: usize,
    #[serde(default = "d_per_class")]
    pub train_per_class: usize,
    #[serde(default = "d_per_class")]
    pub test_per_class: usize,
    #[serde(default = "d_spread")]
    pub spread: f64,
    #[serde(default = "d_dataset_seed")]
    pub dataset_seed: u64,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    /// Batches per worker slot.
    pub allocation: Vec<usize>,
    #[serde(default = "d_one")]
    pub partition_seed: u64,
    #[serde(default)]
    pub idx: Option<IdxFiles>,
}

fn d_classes() -> usize {
    10
}
fn d_per_class() -> usize {
    100
}
fn d_spread() -> f64 {
    0.3
}
fn d_dataset_seed() -> u64 {
    3
}
fn d_batch() -> usize {
    DEFAULT_BATCH_SIZE
}
fn d_one() -> u64 {
    1
}

impl DataSection {
    /// Training shards (one per allocation slot) and the test set.
    pub fn load(&self) -> Result<(Vec<Dataset>, Dataset)> {
        let (train, test) = match &self.idx {
            Some(f) => (
                load_idx(&f.train_images, &f.train_labels)?,
                load_idx(&f.test_images, &f.test_labels)?,
            ),
            None => (
                synth_dataset(
                    self.n_classes,
                    self.train_per_class,
                    self.spread,
                    self.dataset_seed,
                )?,
                synth_dataset(
                    self.n_classes,
                    self.test_per_class,
                    self.spread,
                    self.dataset_seed.wrapping_add(0x7E57),
                )?,
            ),
        };
        let row = AllocationRow::new(self.allocation.clone(), self.batch_size);
        Ok((partition(&train, &row, self.partition_seed)?, test))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    #[serde(default = "d_lr")]
    pub learning_rate: f64,
    #[serde(default = "d_epochs")]
    pub epochs: u32,
    #[serde(default = "d_one")]
    pub seed: u64,
}

fn d_lr() -> f64 {
    0.1
}
fn d_epochs() -> u32 {
    DEFAULT_EPOCHS_PER_ROUND
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            learning_rate: d_lr(),
            epochs: d_epochs(),
            seed: 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModeName {
    Sync,
    Async,
}

impl From<ModeName> for Mode {
    fn from(m: ModeName) -> Mode {
        match m {
            ModeName::Sync => Mode::Sync,
            ModeName::Async => Mode::Async,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServerSection {
    /// Worker host addresses; an address listed twice gets two models.
    pub workers: Vec<String>,
    #[serde(default = "d_mode")]
    pub mode: ModeName,
    #[serde(default = "d_rounds")]
    pub rounds: usize,
    #[serde(default = "d_selector")]
    pub selector: SelectorSpec,
    #[serde(default)]
    pub policy: Option<PolicySpec>,
    #[serde(default = "d_ready")]
    pub ready_timeout_secs: f64,
    #[serde(default = "d_round_timeout")]
    pub round_timeout_secs: f64,
    /// Seconds to train one sample on the server; measured when absent.
    #[serde(default)]
    pub t_onedata: Option<f64>,
}

fn d_mode() -> ModeName {
    ModeName::Sync
}
fn d_rounds() -> usize {
    10
}
fn d_selector() -> SelectorSpec {
    SelectorSpec::All
}
fn d_ready() -> f64 {
    10.0
}
fn d_round_timeout() -> f64 {
    60.0
}

impl ServerSection {
    /// The configured policy, or FedAvg for sync and polynomial staleness
    /// weighting for async.
    pub fn policy(&self) -> AggregationPolicy {
        match (&self.policy, self.mode) {
            (Some(p), _) => p.to_policy(),
            (None, ModeName::Sync) => AggregationPolicy::FedAvg,
            (None, ModeName::Async) => {
                AggregationPolicy::Weighted(StalenessScheme::Polynomial(DEFAULT_STALENESS_EXPONENT))
            }
        }
    }

    pub fn probe(&self) -> Option<ServerProbe> {
        self.t_onedata.map(|t| ServerProbe {
            t_onedata: t,
            cpu_freq_server: 1.0,
        })
    }

    pub fn ready_timeout(&self) -> Duration {
        Duration::from_secs_f64(self.ready_timeout_secs)
    }

    pub fn round_timeout(&self) -> Duration {
        Duration::from_secs_f64(self.round_timeout_secs)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkerSection {
    /// Allocation slots served by this host, in the order models are created.
    pub shards: Vec<usize>,
    #[serde(default = "d_speed")]
    pub speed_class: f64,
    /// Emulated seconds per sample-epoch; 0 trains at native speed.
    #[serde(default)]
    pub unit_cost: f64,
    /// Defaults to `1 / speed_class`.
    #[serde(default)]
    pub cpu_freq: Option<f64>,
    #[serde(default = "d_speed")]
    pub cpu_prop: f64,
}

fn d_speed() -> f64 {
    1.0
}

impl WorkerSection {
    pub fn cpu_freq(&self) -> f64 {
        self.cpu_freq.unwrap_or(1.0 / self.speed_class)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Server,
    Worker,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParticipantConfig {
    pub role: Role,
    #[serde(default = "d_host")]
    pub host: String,
    #[serde(default)]
    pub port: u16,
    #[serde(default)]
    pub blob_port: u16,
    #[serde(default)]
    pub storage_dir: Option<PathBuf>,
    #[serde(default = "d_ttl")]
    pub credential_ttl: f64,
    pub task: DataSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub server: Option<ServerSection>,
    #[serde(default)]
    pub worker: Option<WorkerSection>,
}

fn d_host() -> String {
    "127.0.0.1".into()
}
fn d_ttl() -> f64 {
    DEFAULT_TTL_SECS
}

impl ParticipantConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(config_err)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&read(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.credential_ttl > 0.0) {
            return Err(Error::Config("credential_ttl must be positive".into()));
        }
        if !(self.train.learning_rate > 0.0) || self.train.epochs == 0 {
            return Err(Error::Config(
                "train.learning_rate must be positive and train.epochs >= 1".into(),
            ));
        }
        if self.task.allocation.is_empty() || self.task.batch_size == 0 {
            return Err(Error::Config(
                "task.allocation must be non-empty and batch_size >= 1".into(),
            ));
        }
        match self.role {
            Role::Server => {
                let s = self
                    .server
                    .as_ref()
                    .ok_or_else(|| Error::Config("role = \"server\" needs a [server] table".into()))?;
                if s.workers.is_empty() {
                    return Err(Error::Config(
                        "server.workers must list at least one address".into(),
                    ));
                }
                for w in &s.workers {
                    w.parse::<crate::warehouse::Address>().map_err(config_err)?;
                }
                if s.rounds == 0 {
                    return Err(Error::Config("server.rounds must be at least 1".into()));
                }
                if !(s.ready_timeout_secs > 0.0) || !(s.round_timeout_secs > 0.0) {
                    return Err(Error::Config("timeouts must be positive".into()));
                }
                s.policy().validate().map_err(config_err)?;
                Selector::new(s.selector.to_policy(self.train.epochs), self.train.epochs)
                    .validate()
                    .map_err(config_err)?;
            }
            Role::Worker => {
                let w = self
                    .worker
                    .as_ref()
                    .ok_or_else(|| Error::Config("role = \"worker\" needs a [worker] table".into()))?;
                if let Some(bad) = w.shards.iter().find(|&&i| i >= self.task.allocation.len()) {
                    return Err(Error::Config(format!(
                        "worker.shards entry {bad} is outside the allocation of {} slots",
                        self.task.allocation.len()
                    )));
                }
                if !(w.speed_class > 0.0) || w.unit_cost < 0.0 || !(w.cpu_freq() > 0.0) {
                    return Err(Error::Config("speed_class and cpu_freq must be positive".into()));
                }
                if !(w.cpu_prop > 0.0 && w.cpu_prop <= 1.0) {
                    return Err(Error::Config("cpu_prop must be in (0, 1]".into()));
                }
            }
        }
        Ok(())
    }
}

/// On-disk form of a simulation scenario.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    pub name: String,
    pub mode: SimMode,
    pub rounds: usize,
    #[serde(default = "d_epochs")]
    pub epochs: u32,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default = "d_lr")]
    pub learning_rate: f64,
    #[serde(default = "d_unit_cost")]
    pub unit_cost: f64,
    #[serde(default = "d_target")]
    pub target_accuracy: f64,
    pub task: TaskSpec,
    #[serde(default = "d_selector")]
    pub selector: SelectorSpec,
    #[serde(default)]
    pub policy: Option<PolicySpec>,
    pub workers: Vec<SimWorkerSpec>,
}

fn d_unit_cost() -> f64 {
    DEFAULT_UNIT_COST
}
fn d_target() -> f64 {
    0.8
}

impl ScenarioFile {
    pub fn parse(text: &str) -> Result<ScenarioConfig> {
        let file: ScenarioFile = toml::from_str(text).map_err(config_err)?;
        let cfg = file.into_config();
        cfg.validate().map_err(config_err)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<ScenarioConfig> {
        Self::parse(&read(path)?)
    }

    pub fn into_config(self) -> ScenarioConfig {
        let policy = match (&self.policy, self.mode) {
            (Some(p), _) => p.to_policy(),
            (None, SimMode::Async) => {
                AggregationPolicy::Weighted(StalenessScheme::Polynomial(DEFAULT_STALENESS_EXPONENT))
            }
            (None, _) => AggregationPolicy::FedAvg,
        };
        ScenarioConfig {
            name: self.name,
            selector: self.selector.to_policy(self.epochs),
            policy,
            mode: self.mode,
            rounds: self.rounds,
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            unit_cost: self.unit_cost,
            task: self.task,
            target_accuracy: self.target_accuracy,
            workers: self.workers,
        }
    }

    pub fn from_config(cfg: &ScenarioConfig) -> Self {
        ScenarioFile {
            name: cfg.name.clone(),
            mode: cfg.mode,
            rounds: cfg.rounds,
            epochs: cfg.epochs,
            batch_size: cfg.batch_size,
            learning_rate: cfg.learning_rate,
            unit_cost: cfg.unit_cost,
            target_accuracy: cfg.target_accuracy,
            task: cfg.task.clone(),
            selector: SelectorSpec::from_policy(&cfg.selector),
            policy: Some(PolicySpec::from_policy(cfg.policy)),
            workers: cfg.workers.clone(),
        }
    }

    pub fn to_toml(cfg: &ScenarioConfig) -> Result<String> {
        toml::to_string(&Self::from_config(cfg)).map_err(config_err)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenarios;

    const SERVER: &str = r#"
role = "server"
port = 7000
[task]
allocation = [1, 1, 1]
batch_size = 10
[server]
workers = ["127.0.0.1:7001", "127.0.0.1:7001", "127.0.0.1:7002"]
mode = "async"
selector = { kind = "timebased", threshold_a = 0.01 }
"#;

    #[test]
    fn server_file_with_defaults() {
        let cfg = ParticipantConfig::parse(SERVER).unwrap();
        assert_eq!(cfg.role, Role::Server);
        assert_eq!(cfg.host, "127.0.0.1");
        assert_eq!(cfg.credential_ttl, 60.0);
        let s = cfg.server.unwrap();
        assert_eq!(s.workers.len(), 3);
        assert_eq!(s.rounds, 10);
        assert_eq!(
            s.policy(),
            AggregationPolicy::Weighted(StalenessScheme::Polynomial(DEFAULT_STALENESS_EXPONENT))
        );
        assert_eq!(
            s.selector.to_policy(10),
            SelectionPolicy::TimeBased(TimeBasedState {
                r: 10,
                t_budget: 0.0,
                threshold_a: 0.01
            })
        );
    }

    #[test]
    fn worker_file_and_data() {
        let cfg = ParticipantConfig::parse(
            r#"
role = "worker"
[task]
n_classes = 4
train_per_class = 10
allocation = [1, 2]
batch_size = 5
[worker]
shards = [1]
speed_class = 2.0
"#,
        )
        .unwrap();
        let w = cfg.worker.as_ref().unwrap();
        assert_eq!(w.cpu_freq(), 0.5);
        let (shards, test) = cfg.task.load().unwrap();
        assert_eq!(shards[1].len(), 10);
        assert_eq!(test.len(), 400);
    }

    #[test]
    fn bad_files_are_config_errors() {
        let cases = [
            "role = \"server\"\n[task]\nallocation = [1]\n",
            "role = \"worker\"\n[task]\nallocation = [1]\n[worker]\nshards = [3]\n",
            "role = \"boss\"\n[task]\nallocation = [1]\n",
            "role = \"worker\"\nbogus = 1\n[task]\nallocation = [1]\n[worker]\nshards = [0]\n",
            "role = \"server\"\n[task]\nallocation = [1]\n[server]\nworkers = [\"nohost\"]\n",
            "not toml at all [",
        ];
        for text in cases {
            assert!(
                matches!(ParticipantConfig::parse(text), Err(Error::Config(_))),
                "{text}"
            );
        }
    }

    #[test]
    fn builtin_scenarios_survive_a_toml_round_trip() {
        for name in scenarios::builtin_names() {
            let cfg = scenarios::builtin(&name).unwrap();
            let text = ScenarioFile::to_toml(&cfg).unwrap();
            let back = ScenarioFile::parse(&text).unwrap();
            assert_eq!(back, cfg, "{name}");
        }
    }

    #[test]
    fn scenario_file_uses_sim_keys() {
        let cfg = ScenarioFile::parse(
            r#"
name = "two"
mode = "sync"
rounds = 3
batch_size = 10
unit_cost = 0.002
[task]
n_classes = 4
train_per_class = 20
test_per_class = 10
spread = 0.2
dataset_seed = 1
[[workers]]
speed_class = 1.0
transmit_delay = 0.1
batches = 2
[[workers]]
speed_class = 10.0
transmit_delay = 0.5
batches = 1
"#,
        )
        .unwrap();
        assert_eq!(cfg.workers[1].speed_class, 10.0);
        assert_eq!(cfg.unit_cost, 0.002);
        assert_eq!(cfg.policy, AggregationPolicy::FedAvg);
    }
}
