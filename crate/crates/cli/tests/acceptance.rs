//! Acceptance criteria 1-10, one PASS/FAIL line each.
//!
//! Every criterion runs even if an earlier one fails; the process exits
//! non-zero if any failed.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::sync::{Arc, Barrier};
use std::thread;
use std::time::Instant;

use fedloom::aggregation::{
    aggregate, normalize, staleness_weight, AggregationPolicy, ServerModelState, StalenessScheme, WorkerId,
    WorkerResponse,
};
use fedloom::clock::SystemClock;
use fedloom::model::{loss_and_gradient, ModelWeights, Sample};
use fedloom::orchestrator::{parse_records, RoundRecord};
use fedloom::protocol::blob::{blob_fetch, serve_blobs, BlobService, TransferCredential};
use fedloom::protocol::frame::{decode_frame, encode_frame, encode_raw, Message};
use fedloom::scenarios;
use fedloom::selection::{
    rminmax_deadline, select_rminmax, select_timebased, update_timebased, RMinMaxState, TimeBasedState,
    WorkerProfile,
};
use fedloom::sim::{run_scenario, time_to_accuracy};
use fedloom::warehouse::{Address, DataId, ModelPointer, Warehouse};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

mod common;
use common::{start_worker, Workers, FEDLOOM, NET_TASK};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn random_response(
    rng: &mut ChaCha8Rng,
    worker: u32,
    nf: usize,
    nc: usize,
    base_version: u64,
) -> WorkerResponse {
    let values = (0..(nf + 1) * nc).map(|_| rng.random_range(-5.0..5.0)).collect();
    WorkerResponse {
        worker: WorkerId(worker),
        base_version,
        epochs: rng.random_range(1..20),
        weights: ModelWeights::new(nf, nc, values).unwrap(),
        data_count: rng.random_range(1..500),
    }
}

fn brute_mean(responses: &[WorkerResponse]) -> Vec<f64> {
    let n = responses[0].weights.values().len();
    (0..n)
        .map(|i| responses.iter().map(|r| r.weights.values()[i]).sum::<f64>() / responses.len() as f64)
        .collect()
}

fn criterion_1() -> Outcome {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst = 0.0f64;
    for case in 0..100 {
        let count = rng.random_range(1..=50);
        // (nf + 1) * nc stays at or under 1000 weights.
        let nc = rng.random_range(2..=10);
        let nf = rng.random_range(1..=(1000 / nc - 1));
        let responses: Vec<_> = (0..count)
            .map(|i| random_response(&mut rng, i, nf, nc, 0))
            .collect();
        let state = ServerModelState::new(ModelWeights::zeros(nf, nc).unwrap());
        let merged = aggregate(&state, &responses, AggregationPolicy::FedAvg).map_err(|e| e.to_string())?;
        let diff = max_abs_diff(merged.weights.values(), &brute_mean(&responses));
        worst = worst.max(diff);
        ensure(diff <= 1e-12, || format!("case {case}: max deviation {diff:e}"))?;
    }
    let secs = started.elapsed().as_secs_f64();
    ensure(secs < 5.0, || format!("took {secs:.2} s"))?;
    Ok(format!("100 cases, worst deviation {worst:.1e}, {secs:.2} s"))
}

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let schemes = [
        StalenessScheme::Linear,
        StalenessScheme::Polynomial(0.5),
        StalenessScheme::Exponential(0.5),
    ];
    for case in 0..50 {
        let version = rng.random_range(0..30);
        let count = rng.random_range(1..=20);
        let responses: Vec<_> = (0..count)
            .map(|i| random_response(&mut rng, i, 4, 3, version))
            .collect();
        let state = ServerModelState {
            version,
            weights: ModelWeights::zeros(4, 3).unwrap(),
        };
        let fedavg = aggregate(&state, &responses, AggregationPolicy::FedAvg).unwrap();
        for scheme in schemes {
            let weighted = aggregate(&state, &responses, AggregationPolicy::Weighted(scheme)).unwrap();
            let diff = max_abs_diff(weighted.weights.values(), fedavg.weights.values());
            ensure(diff <= 1e-12, || {
                format!("case {case} {scheme:?}: deviation {diff:e}")
            })?;
        }
    }
    for case in 0..1000 {
        let version = rng.random_range(0..100u64);
        let count = rng.random_range(1..=50);
        let scheme = schemes[case % 3];
        let raw: Vec<f64> = (0..count)
            .map(|_| staleness_weight(scheme, version, rng.random_range(0..=version)).unwrap())
            .collect();
        let total: f64 = normalize(&raw).unwrap().iter().sum();
        ensure((total - 1.0).abs() <= 1e-12, || {
            format!("case {case}: weights sum to {total}")
        })?;
    }
    Ok("fresh weighting equals FedAvg for 3 schemes; 1000 normalizations sum to 1".into())
}

/// Cross-entropy written out from the definition, independent of the
/// library's training code.
fn oracle_loss(values: &[f64], nf: usize, nc: usize, sample: &Sample) -> f64 {
    let logits: Vec<f64> = (0..nc)
        .map(|c| {
            values[nf * nc + c]
                + (0..nf)
                    .map(|f| sample.features[f] * values[f * nc + c])
                    .sum::<f64>()
        })
        .collect();
    let top = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let log_z = top + logits.iter().map(|l| (l - top).exp()).sum::<f64>().ln();
    log_z - logits[sample.label]
}

fn criterion_3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let h = 1e-5;
    let mut worst = 0.0f64;
    for case in 0..5 {
        let (nf, nc) = (rng.random_range(2..8), rng.random_range(2..6));
        let values: Vec<f64> = (0..(nf + 1) * nc).map(|_| rng.random_range(-1.0..1.0)).collect();
        let w = ModelWeights::new(nf, nc, values.clone()).unwrap();
        let sample = Sample {
            features: (0..nf).map(|_| rng.random_range(-2.0..2.0)).collect(),
            label: rng.random_range(0..nc),
        };
        let (loss, grad) = loss_and_gradient(&w, &sample);
        ensure(
            (loss - oracle_loss(&values, nf, nc, &sample)).abs() < 1e-12,
            || format!("case {case}: loss disagrees with the oracle"),
        )?;
        for i in 0..values.len() {
            let mut up = values.clone();
            let mut down = values.clone();
            up[i] += h;
            down[i] -= h;
            let numeric =
                (oracle_loss(&up, nf, nc, &sample) - oracle_loss(&down, nf, nc, &sample)) / (2.0 * h);
            let rel = (grad[i] - numeric).abs() / grad[i].abs().max(numeric.abs()).max(1e-8);
            worst = worst.max(rel);
            ensure(rel <= 1e-4, || {
                format!(
                    "case {case} weight {i}: analytic {} numeric {numeric} rel {rel:e}",
                    grad[i]
                )
            })?;
        }
    }
    Ok(format!("5 samples, worst relative error {worst:.1e}"))
}

fn profiles(t_one: &[f64]) -> Vec<WorkerProfile> {
    t_one
        .iter()
        .enumerate()
        .map(|(i, &t)| WorkerProfile {
            worker: WorkerId(i as u32 + 1),
            t_one: t,
            t_transmit: 0.5,
            cpu_freq: 1.0,
            cpu_prop: 1.0,
            data_count: 1,
        })
        .collect()
}

fn ids(ws: &[u32]) -> BTreeSet<WorkerId> {
    ws.iter().map(|&w| WorkerId(w)).collect()
}

fn criterion_4() -> Outcome {
    let pool = profiles(&[1.0, 2.0, 10.0]);
    let rm = RMinMaxState { rmin: 2.0, rmax: 5.0 };
    ensure(rminmax_deadline(&pool, &rm) == Some(5.5), || {
        "T_minimum is not 5.5".into()
    })?;
    let got = select_rminmax(&pool, &rm);
    ensure(got == ids(&[1, 2]), || format!("r-min/r-max selected {got:?}"))?;

    let at_seven = TimeBasedState {
        r: 3,
        t_budget: 7.0,
        threshold_a: 0.005,
    };
    let got = select_timebased(&pool, &at_seven);
    ensure(got == ids(&[1, 2]), || format!("budget 7 selected {got:?}"))?;

    // Budget starts at zero and opens one worker per stalled round.
    let mut state = TimeBasedState {
        t_budget: 0.0,
        ..at_seven
    };
    let expected: [(f64, &[u32]); 4] = [(0.0, &[]), (3.5, &[1]), (6.5, &[1, 2]), (30.5, &[1, 2, 3])];
    for (step, (budget, members)) in expected.iter().enumerate() {
        ensure(state.t_budget == *budget, || {
            format!("step {step}: budget {}", state.t_budget)
        })?;
        let selected = select_timebased(&pool, &state);
        ensure(selected == ids(members), || {
            format!("step {step}: selected {selected:?}")
        })?;
        let unselected: Vec<_> = pool
            .iter()
            .filter(|p| !selected.contains(&p.worker))
            .cloned()
            .collect();
        state = update_timebased(&state, &unselected, 0.5, 0.5);
    }
    ensure(state.t_budget == 30.5, || {
        "budget moved with nobody left to admit".into()
    })?;
    let kept = update_timebased(&at_seven, &pool[2..], 0.5, 0.6);
    ensure(kept.t_budget == 7.0, || {
        "budget moved despite a large improvement".into()
    })?;
    Ok("r-min/r-max {w1,w2}; budget 0 -> 3.5 -> 6.5 -> 30.5 -> all".into())
}

struct ReferenceRuns {
    seeds: Vec<u64>,
    sequential: Vec<Vec<RoundRecord>>,
    sync: Vec<Vec<RoundRecord>>,
    asynchronous: Vec<Vec<RoundRecord>>,
    random: Vec<Vec<RoundRecord>>,
    secs: f64,
}

fn reference_runs() -> Result<ReferenceRuns, String> {
    let started = Instant::now();
    let seeds = vec![1, 2, 3];
    let run = |cfg: fedloom::sim::ScenarioConfig| -> Result<Vec<Vec<RoundRecord>>, String> {
        seeds
            .iter()
            .map(|&s| run_scenario(&cfg, s).map_err(|e| format!("{}: {e}", cfg.name)))
            .collect()
    };
    Ok(ReferenceRuns {
        sequential: run(scenarios::reference_sequential())?,
        sync: run(scenarios::reference_sync_timebased())?,
        asynchronous: run(scenarios::reference_async_timebased())?,
        random: run(scenarios::reference_random())?,
        seeds,
        secs: started.elapsed().as_secs_f64(),
    })
}

fn tta(records: &[RoundRecord]) -> Option<f64> {
    time_to_accuracy(records, scenarios::REFERENCE_TARGET)
}

fn criterion_5(runs: &ReferenceRuns) -> Outcome {
    let mut lines = Vec::new();
    for (i, seed) in runs.seeds.iter().enumerate() {
        let (Some(seq), Some(sync), Some(asy)) = (
            tta(&runs.sequential[i]),
            tta(&runs.sync[i]),
            tta(&runs.asynchronous[i]),
        ) else {
            return Err(format!("seed {seed}: a scenario never reached the target"));
        };
        ensure(asy < sync && sync < seq, || {
            format!("seed {seed}: async {asy} sync {sync} sequential {seq}")
        })?;
        ensure(asy <= 0.8 * sync, || {
            format!("seed {seed}: async {asy} is not 20% under sync {sync}")
        })?;
        ensure(sync <= 0.9 * seq, || {
            format!("seed {seed}: sync {sync} is not 10% under sequential {seq}")
        })?;
        lines.push(format!("seed {seed}: {asy:.2} < {sync:.2} < {seq:.2}"));
    }
    ensure(runs.secs < 120.0, || format!("took {:.1} s", runs.secs))?;
    Ok(format!("{} ({:.1} s)", lines.join("; "), runs.secs))
}

fn criterion_6(runs: &ReferenceRuns) -> Outcome {
    let mut lines = Vec::new();
    for (i, seed) in runs.seeds.iter().enumerate() {
        let sync = tta(&runs.sync[i]).ok_or_else(|| format!("seed {seed}: sync never reached the target"))?;
        match tta(&runs.random[i]) {
            Some(r) => {
                ensure(r >= sync, || format!("seed {seed}: random {r} beat sync {sync}"))?;
                lines.push(format!("seed {seed}: {r:.2} >= {sync:.2}"));
            }
            None => lines.push(format!("seed {seed}: unreached")),
        }
    }
    Ok(lines.join("; "))
}

fn criterion_7(runs: &ReferenceRuns) -> Outcome {
    let ceiling = runs
        .sequential
        .iter()
        .map(|recs| recs.iter().map(|r| r.accuracy).fold(0.0, f64::max))
        .fold(f64::INFINITY, f64::min);
    let cfg = scenarios::rminmax_stall();
    let mut finals = Vec::new();
    for &seed in &runs.seeds {
        let records = run_scenario(&cfg, seed).map_err(|e| e.to_string())?;
        ensure(records.len() == 50, || {
            format!("seed {seed}: {} rounds", records.len())
        })?;
        let first = &records[0].selected;
        ensure(records.iter().all(|r| r.selected.is_subset(first)), || {
            format!("seed {seed}: selected set grew")
        })?;
        let last = records.last().unwrap().accuracy;
        ensure(last <= ceiling - 0.25, || {
            format!("seed {seed}: final {last} vs ceiling {ceiling}")
        })?;
        finals.push(format!("{last:.3}"));
    }
    Ok(format!(
        "set fixed for 50 rounds, final accuracy {} vs ceiling {ceiling:.3}",
        finals.join("/")
    ))
}

fn random_pointer(rng: &mut ChaCha8Rng) -> ModelPointer {
    let host = match rng.random_range(0..3) {
        0 => "127.0.0.1".to_string(),
        1 => "localhost".to_string(),
        _ => format!(
            "10.{}.{}.{}",
            rng.random::<u8>(),
            rng.random::<u8>(),
            rng.random::<u8>()
        ),
    };
    let address = Address::new(host, rng.random_range(1..=u16::MAX)).unwrap();
    ModelPointer::new(address, DataId::from_bytes(rng.random()))
}

fn random_message(rng: &mut ChaCha8Rng) -> Message {
    let a = random_pointer(rng);
    let b = random_pointer(rng);
    match rng.random_range(0..7) {
        0 => Message::AddWorkerRequest { server_pointer: a },
        1 => Message::WorkerReady {
            worker_pointer: a,
            server_pointer: b,
            data_count: rng.random(),
            cpu_freq: rng.random_range(0.1..5.0),
            cpu_prop: rng.random(),
        },
        2 => Message::TrainRequest {
            worker_pointer: a,
            server_pointer: b,
            epochs: rng.random(),
            server_version: rng.random(),
        },
        3 => Message::TrainDone {
            worker_pointer: a,
            server_pointer: b,
            server_version: rng.random(),
            epochs_trained: rng.random(),
            train_seconds: rng.random::<f64>() * 1e3,
        },
        4 => Message::TrainRefused {
            worker_pointer: a,
            server_pointer: b,
            reason: (0..rng.random_range(0..40))
                .map(|_| rng.random_range(' '..='~'))
                .collect(),
        },
        5 => Message::FetchRequest {
            target_pointer: a,
            requester_pointer: b,
        },
        _ => Message::FetchCredential {
            credential: TransferCredential {
                address: random_pointer(rng).address,
                resource: DataId::from_bytes(rng.random()),
                token: hex_token(rng),
                single_use: true,
            },
            target_pointer: a,
            requester_pointer: b,
            server_version: rng.random(),
        },
    }
}

fn hex_token(rng: &mut ChaCha8Rng) -> String {
    (0..32)
        .map(|_| char::from_digit(rng.random_range(0..16), 16).unwrap())
        .collect()
}

fn criterion_8() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(808);
    for case in 0..1000 {
        let msg = random_message(&mut rng);
        let bytes = encode_frame(&msg).map_err(|e| e.to_string())?;
        let decoded = decode_frame(&bytes).map_err(|e| format!("case {case}: {e}"))?;
        ensure(decoded == Some((msg.clone(), bytes.len())), || {
            format!("case {case}: {msg:?} changed")
        })?;
    }

    let fixture = encode_raw(b"RELAT", b"{}").map_err(|e| e.to_string())?;
    let expected = [0x00, 0x00, 0x00, 0x07, 0x52, 0x45, 0x4C, 0x41, 0x54, 0x7B, 0x7D];
    ensure(fixture == expected, || format!("fixture bytes {fixture:02X?}"))?;

    let warehouse = Arc::new(Warehouse::in_memory());
    let id = warehouse
        .put_weights(&ModelWeights::zeros(3, 2).unwrap())
        .unwrap();
    let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let address = Address::new("127.0.0.1", listener.local_addr().unwrap().port()).unwrap();
    let service = Arc::new(BlobService::new(
        warehouse.clone(),
        address,
        Arc::new(SystemClock::new()),
        60.0,
    ));
    let mut handle = serve_blobs(service.clone(), listener).map_err(|e| e.to_string())?;

    let single = service.offer(&id).unwrap();
    ensure(blob_fetch(&single).is_ok(), || "first use failed".into())?;
    ensure(blob_fetch(&single).is_err(), || "second use was admitted".into())?;

    let racers = 8;
    for trial in 0..5 {
        let cred = service.offer(&id).unwrap();
        let gate = Arc::new(Barrier::new(racers));
        let threads: Vec<_> = (0..racers)
            .map(|_| {
                let (cred, gate) = (cred.clone(), gate.clone());
                thread::spawn(move || {
                    gate.wait();
                    blob_fetch(&cred).is_ok()
                })
            })
            .collect();
        let winners = threads
            .into_iter()
            .map(|t| t.join().unwrap())
            .filter(|ok| *ok)
            .count();
        ensure(winners == 1, || {
            format!("trial {trial}: {winners} of {racers} fetches succeeded")
        })?;
    }
    handle.stop();
    Ok("1000 roundtrips, fixture exact, reuse rejected, 5 races with one winner each".into())
}

fn serve(dir: &Path, config: &Path, mode: &str) -> Result<(Vec<RoundRecord>, Vec<Vec<u64>>), String> {
    let out = dir.join(mode);
    let status = Command::new(FEDLOOM)
        .args(["serve", "--mode", mode, "--config"])
        .arg(config)
        .arg("--out")
        .arg(&out)
        .env("FEDLOOM_LOG", "warn")
        .stdout(Stdio::null())
        .status()
        .map_err(|e| e.to_string())?;
    ensure(status.success(), || format!("{mode} server exited with {status}"))?;
    let rounds = parse_records(&std::fs::read_to_string(out.join("rounds.csv")).unwrap())
        .map_err(|e| e.to_string())?;
    let consumed = std::fs::read_to_string(out.join("consumed.csv"))
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect();
    Ok((rounds, consumed))
}

fn criterion_9() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut workers = Workers(Vec::new());
    let mut addresses = Vec::new();
    for (shard, speed) in [(0, 1.0), (1, 1.0), (2, 10.0)] {
        let (child, address) = start_worker(dir.path(), shard, speed)?;
        workers.0.push(child);
        addresses.push(format!("{address:?}"));
    }
    let config = dir.path().join("server.toml");
    let text = format!(
        "role = \"server\"\n{NET_TASK}\n[server]\nworkers = [{}]\nrounds = 10\nt_onedata = 0.0001\n",
        addresses.join(", ")
    );
    std::fs::write(&config, text).map_err(|e| e.to_string())?;

    let (rounds, consumed) = serve(dir.path(), &config, "sync")?;
    ensure(rounds.len() == 10, || format!("sync ran {} rounds", rounds.len()))?;
    ensure(!consumed.is_empty(), || "sync consumed nothing".into())?;
    // Columns: round, worker, base_version, dispatch_version, aggregated_at_version.
    ensure(consumed.iter().all(|c| c[2] == c[3]), || {
        "sync aggregated a stale response".into()
    })?;
    let sync_used = consumed.len();

    let (rounds, consumed) = serve(dir.path(), &config, "async")?;
    ensure(rounds.len() == 10, || {
        format!("async ran {} rounds", rounds.len())
    })?;
    let stale = consumed.iter().filter(|c| c[2] < c[4]).count();
    ensure(stale > 0, || "async never accepted a stale response".into())?;
    drop(workers);
    Ok(format!(
        "sync 10 rounds, {sync_used} fresh responses; async 10 rounds, {stale} of {} stale",
        consumed.len()
    ))
}

fn simulate_into(out: &Path) -> Result<(), String> {
    let status = Command::new(FEDLOOM)
        .args([
            "simulate",
            "--scenario",
            "reference_async_timebased",
            "--scenario",
            "table4_1_row3",
            "--seeds",
            "1,2",
            "--out",
        ])
        .arg(out)
        .env("FEDLOOM_LOG", "warn")
        .stdout(Stdio::null())
        .status()
        .map_err(|e| e.to_string())?;
    ensure(status.success(), || format!("simulate exited with {status}"))
}

fn dir_contents(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let path = e.unwrap().path();
            let bytes = std::fs::read(&path).unwrap();
            (PathBuf::from(path.file_name().unwrap()), bytes)
        })
        .collect();
    files.sort();
    files
}

fn criterion_10() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    simulate_into(&a)?;
    simulate_into(&b)?;
    let (first, second) = (dir_contents(&a), dir_contents(&b));
    ensure(first.len() == 5, || {
        format!("expected 4 runs + summary, found {} files", first.len())
    })?;
    ensure(first == second, || "outputs differ between runs".into())?;
    Ok(format!("{} files byte-identical across two runs", first.len()))
}

fn report(index: usize, title: &str, check: impl FnOnce() -> Outcome) -> bool {
    let outcome = std::panic::catch_unwind(std::panic::AssertUnwindSafe(check))
        .unwrap_or_else(|_| Err("panicked".to_string()));
    match outcome {
        Ok(detail) => {
            println!("criterion {index:>2} PASS  {title}: {detail}");
            true
        }
        Err(why) => {
            println!("criterion {index:>2} FAIL  {title}: {why}");
            false
        }
    }
}

fn main() {
    let mut passed = vec![
        report(1, "aggregation oracle equivalence", criterion_1),
        report(2, "staleness algebra", criterion_2),
        report(3, "gradient check", criterion_3),
        report(4, "selection hand-traces", criterion_4),
    ];
    match reference_runs() {
        Ok(runs) => {
            passed.push(report(5, "directional speedup", || criterion_5(&runs)));
            passed.push(report(6, "random selection no faster than sync", || {
                criterion_6(&runs)
            }));
            passed.push(report(7, "r-min/r-max stall", || criterion_7(&runs)));
        }
        Err(e) => {
            for (i, title) in [
                (5, "directional speedup"),
                (6, "random selection no faster than sync"),
                (7, "r-min/r-max stall"),
            ] {
                passed.push(report(i, title, || Err(e.clone())));
            }
        }
    }
    passed.push(report(8, "protocol conformance", criterion_8));
    passed.push(report(9, "end-to-end network run", criterion_9));
    passed.push(report(10, "simulation determinism", criterion_10));
    let failed = passed.iter().filter(|p| !**p).count();
    println!("acceptance: {} passed, {failed} failed", passed.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
