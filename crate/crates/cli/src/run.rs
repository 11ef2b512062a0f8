//! Long-running network participants.

use std::io::Write;
use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use fedloom::aggregation::Mode;
use fedloom::config::{ModeName, ParticipantConfig, Role};
use fedloom::model::init_weights;
use fedloom::orchestrator::{
    export_consumed, export_records, EndpointConfig, ServerConfig, ServerRuntime, WorkerHost,
    WorkerHostConfig,
};
use fedloom::selection::Selector;
use fedloom::warehouse::Address;
use fedloom::Error;

use crate::{Failure, ModeArg, EXIT_CONFIG, EXIT_NOT_READY};

const RETRY_PAUSE: Duration = Duration::from_millis(100);

fn load(path: &Path, role: Role) -> Result<ParticipantConfig, Failure> {
    let cfg = ParticipantConfig::load(path)?;
    if cfg.role != role {
        return Err(Failure::new(
            EXIT_CONFIG,
            format!("{}: role is {:?}, expected {role:?}", path.display(), cfg.role),
        ));
    }
    Ok(cfg)
}

fn endpoint(cfg: &ParticipantConfig) -> EndpointConfig {
    EndpointConfig {
        host: cfg.host.clone(),
        port: cfg.port,
        blob_port: cfg.blob_port,
        credential_ttl: cfg.credential_ttl,
        storage_dir: cfg.storage_dir.clone(),
        ..Default::default()
    }
}

fn write(path: &Path, text: &str) -> Result<(), Failure> {
    std::fs::write(path, text).map_err(|e| Failure::new(1, format!("{}: {e}", path.display())))
}

/// Adds every configured worker, retrying while hosts are still starting.
fn recruit(srv: &mut ServerRuntime, addresses: &[Address], timeout: Duration) -> Result<(), Failure> {
    let deadline = Instant::now() + timeout;
    for address in addresses {
        loop {
            match srv.add_worker(address) {
                Ok(_) => break,
                Err(Error::Transport(e)) if Instant::now() < deadline => {
                    log::debug!("{address} not reachable yet: {e}");
                    thread::sleep(RETRY_PAUSE);
                }
                Err(e @ (Error::Transport(_) | Error::RoundAborted(_))) => {
                    return Err(Failure::new(
                        EXIT_NOT_READY,
                        format!("worker {address} never became ready: {e}"),
                    ))
                }
                Err(e) => return Err(e.into()),
            }
        }
    }
    Ok(())
}

pub fn serve(path: &Path, mode: Option<ModeArg>, out: &Path, stop: Arc<AtomicBool>) -> Result<(), Failure> {
    let cfg = load(path, Role::Server)?;
    let Some(mut s) = cfg.server.clone() else {
        unreachable!("validated")
    };
    let addresses: Vec<Address> = s
        .workers
        .iter()
        .map(|w| w.parse())
        .collect::<fedloom::Result<_>>()?;
    match mode {
        Some(ModeArg::Sync) => s.mode = ModeName::Sync,
        Some(ModeArg::Async) => s.mode = ModeName::Async,
        None => {}
    }
    let mode: Mode = s.mode.into();
    std::fs::create_dir_all(out).map_err(|e| Failure::new(1, format!("{}: {e}", out.display())))?;

    let (_, test) = cfg.task.load()?;
    let initial = init_weights(test.n_features(), test.n_classes(), cfg.train.seed)?;
    let epochs = cfg.train.epochs;
    let mut srv = ServerRuntime::start(
        ServerConfig {
            endpoint: endpoint(&cfg),
            mode,
            policy: s.policy(),
            selector: Selector::new(s.selector.to_policy(epochs), epochs),
            probe: s.probe(),
            ready_timeout: s.ready_timeout(),
            round_timeout: s.round_timeout(),
        },
        initial,
        test,
    )?;
    let result = (|| {
        recruit(&mut srv, &addresses, s.ready_timeout())?;
        log::info!(
            "{} workers ready, running {} {mode:?} rounds",
            addresses.len(),
            s.rounds
        );
        match mode {
            Mode::Sync => {
                for _ in 0..s.rounds {
                    if stop.load(Ordering::Relaxed) {
                        log::info!("terminated; keeping the rounds finished so far");
                        break;
                    }
                    let rec = srv.run_sync_round()?;
                    log::info!("round {} accuracy {:.4}", rec.round_index, rec.accuracy);
                }
            }
            Mode::Async => {
                srv.run_async_loop(s.rounds)?;
            }
        }
        Ok::<_, Failure>(())
    })();
    let c = srv.coordinator();
    write(&out.join("rounds.csv"), &export_records(c.records()))?;
    write(&out.join("consumed.csv"), &export_consumed(c.consumed()))?;
    println!("rounds {} final_accuracy {:.4}", c.records().len(), c.accuracy());
    srv.stop();
    result
}

pub fn work(path: &Path, stop: Arc<AtomicBool>) -> Result<(), Failure> {
    let cfg = load(path, Role::Worker)?;
    let Some(w) = cfg.worker.clone() else {
        unreachable!("validated")
    };
    let (shards, test) = cfg.task.load()?;
    let mine = w.shards.iter().map(|&i| shards[i].clone()).collect();
    let mut host = WorkerHost::start(WorkerHostConfig {
        endpoint: endpoint(&cfg),
        shards: mine,
        n_features: test.n_features(),
        n_classes: test.n_classes(),
        learning_rate: cfg.train.learning_rate,
        seed: cfg.train.seed,
        cpu_freq: w.cpu_freq(),
        cpu_prop: w.cpu_prop,
        unit_cost: w.unit_cost,
        speed_class: w.speed_class,
    })?;
    // Announced on stdout so a supervisor can learn a port picked by the OS.
    println!("listening {}", host.address());
    let _ = std::io::stdout().flush();
    while !stop.load(Ordering::Relaxed) {
        thread::sleep(Duration::from_millis(50));
    }
    log::info!("terminating after {} trainings", host.trainings());
    host.stop();
    Ok(())
}
