//! Simulation runs and report output.

use std::path::{Path, PathBuf};

use fedloom::config::ScenarioFile;
use fedloom::orchestrator::{export_records, parse_records};
use fedloom::scenarios;
use fedloom::sim::{
    comparison_from_rows, run_scenario, summarize, time_to_accuracy, ScenarioConfig, SimMode,
};

use crate::{Failure, ModeArg, EXIT_CONFIG};

pub fn list() {
    for name in scenarios::builtin_names() {
        println!("{name}");
    }
}

fn resolve(spec: &str) -> Result<ScenarioConfig, Failure> {
    let path = Path::new(spec);
    if path.exists() || spec.ends_with(".toml") {
        return Ok(ScenarioFile::load(path)?);
    }
    scenarios::builtin(spec).ok_or_else(|| {
        Failure::new(
            EXIT_CONFIG,
            format!("{spec:?} is neither a scenario file nor a built-in scenario (see --list)"),
        )
    })
}

fn write(path: PathBuf, text: &str) -> Result<(), Failure> {
    std::fs::write(&path, text).map_err(|e| Failure::new(1, format!("{}: {e}", path.display())))
}

pub fn simulate(
    specs: &[String],
    seeds: &[u64],
    out: &Path,
    target: Option<f64>,
    mode: Option<ModeArg>,
) -> Result<(), Failure> {
    if seeds.is_empty() {
        return Err(Failure::new(EXIT_CONFIG, "at least one seed is required"));
    }
    // Everything is validated before the first event runs.
    let mut configs = Vec::new();
    for spec in specs {
        let mut cfg = resolve(spec)?;
        if let Some(t) = target {
            cfg.target_accuracy = t;
        }
        match mode {
            Some(ModeArg::Sync) => cfg.mode = SimMode::Sync,
            Some(ModeArg::Async) => cfg.mode = SimMode::Async,
            None => {}
        }
        cfg.validate()?;
        if configs.iter().any(|c: &ScenarioConfig| c.name == cfg.name) {
            return Err(Failure::new(
                EXIT_CONFIG,
                format!("scenario {:?} given twice", cfg.name),
            ));
        }
        configs.push(cfg);
    }
    std::fs::create_dir_all(out).map_err(|e| Failure::new(1, format!("{}: {e}", out.display())))?;

    let mut rows = Vec::new();
    for cfg in &configs {
        for &seed in seeds {
            let records = run_scenario(cfg, seed)?;
            write(
                out.join(format!("{}_seed{seed}.csv", cfg.name)),
                &export_records(&records),
            )?;
            let row = summarize(&cfg.name, seed, &records, cfg.target_accuracy);
            log::info!(
                "{} seed {seed}: {} rounds, time to {} {}",
                cfg.name,
                row.rounds,
                cfg.target_accuracy,
                row.time_to_accuracy
                    .map_or("unreached".into(), |t| format!("{t}s"))
            );
            rows.push(row);
        }
    }
    let names = configs.iter().map(|c| c.name.clone()).collect();
    let summary = comparison_from_rows(rows, names).to_csv();
    write(out.join("summary.csv"), &summary)?;
    print!("{summary}");
    Ok(())
}

pub fn report(path: &Path, target: f64) -> Result<(), Failure> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Failure::new(EXIT_CONFIG, format!("{}: {e}", path.display())))?;
    let mut records =
        parse_records(&text).map_err(|e| Failure::new(EXIT_CONFIG, format!("{}: {e}", path.display())))?;
    records.sort_by(|a, b| a.finished_at.total_cmp(&b.finished_at));
    println!("elapsed_seconds,accuracy");
    for r in &records {
        println!("{},{}", r.finished_at, r.accuracy);
    }
    match time_to_accuracy(&records, target) {
        Some(t) => println!("time_to_accuracy {target} {t}"),
        None => println!("time_to_accuracy {target} unreached"),
    }
    Ok(())
}
