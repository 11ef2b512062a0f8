//! Named, ready-to-run simulation scenarios.
//!
//! `table4_1_row{1..6}` and `table4_2_row{1..6}` carry the batch
//! allocations of the 10- and 30-worker experiment tables. Rows 4-6 stand
//! for the second data set with the same synthetic task at a larger batch
//! count. Workers are spread over three machine groups with speed classes
//! 1x, 2x and 10x.
//!
//! The `reference_*` scenarios share one heterogeneous 10-worker pool and
//! differ only in mode and selection policy.

use crate::aggregation::{AggregationPolicy, StalenessScheme, DEFAULT_STALENESS_EXPONENT};
use crate::model::TrainConfig;
use crate::selection::{RMinMaxState, SelectionPolicy, TimeBasedState, DEFAULT_EPOCHS_PER_ROUND};
use crate::sim::{ScenarioConfig, SimMode, SimWorkerSpec, TaskSpec, DEFAULT_UNIT_COST};

/// Speed class of each worker in a 10-worker pool (three machine groups).
pub const REFERENCE_SPEEDS: [f64; 10] = [1.0, 1.0, 1.0, 2.0, 2.0, 2.0, 10.0, 10.0, 10.0, 10.0];
pub const REFERENCE_TARGET: f64 = 0.80;
pub const REFERENCE_BATCH: usize = 50;
pub const REFERENCE_TRANSMIT: f64 = 0.05;
pub const REFERENCE_LR: f64 = 0.02;
pub const REFERENCE_SPREAD: f64 = 0.3;
pub const REFERENCE_ROUNDS: usize = 60;
pub const REFERENCE_EPOCHS: u32 = 20;
/// Accuracy gain below which the time budget admits the next worker.
pub const REFERENCE_THRESHOLD: f64 = 0.05;

/// Allocation of the reference pool: the 2x group holds twice the data of
/// the others, so no single group reaches the target quickly on its own.
pub const REFERENCE_BATCHES: [usize; 10] = [1, 1, 1, 2, 2, 2, 1, 1, 1, 1];

pub fn reference_task() -> TaskSpec {
    TaskSpec {
        n_classes: 10,
        train_per_class: 100,
        test_per_class: 100,
        spread: REFERENCE_SPREAD,
        dataset_seed: 3,
    }
}

fn pool(speeds: &[f64], batches: &[usize], transmit: f64) -> Vec<SimWorkerSpec> {
    speeds
        .iter()
        .zip(batches)
        .map(|(&speed_class, &batches)| SimWorkerSpec {
            speed_class,
            transmit_delay: transmit,
            batches,
        })
        .collect()
}

pub fn async_policy() -> AggregationPolicy {
    AggregationPolicy::Weighted(StalenessScheme::Polynomial(DEFAULT_STALENESS_EXPONENT))
}

pub fn timebased() -> SelectionPolicy {
    SelectionPolicy::TimeBased(TimeBasedState {
        r: REFERENCE_EPOCHS,
        threshold_a: REFERENCE_THRESHOLD,
        ..Default::default()
    })
}

fn reference(name: &str, mode: SimMode, selector: SelectionPolicy, batches: &[usize]) -> ScenarioConfig {
    ScenarioConfig {
        name: name.to_string(),
        workers: pool(&REFERENCE_SPEEDS, batches, REFERENCE_TRANSMIT),
        selector,
        policy: match mode {
            SimMode::Async => async_policy(),
            _ => AggregationPolicy::FedAvg,
        },
        mode,
        rounds: REFERENCE_ROUNDS,
        epochs: REFERENCE_EPOCHS,
        batch_size: REFERENCE_BATCH,
        learning_rate: REFERENCE_LR,
        unit_cost: DEFAULT_UNIT_COST,
        task: reference_task(),
        target_accuracy: REFERENCE_TARGET,
    }
}

/// All batches on the fastest worker.
pub fn reference_sequential() -> ScenarioConfig {
    let total: usize = REFERENCE_BATCHES.iter().sum();
    let mut batches = [0; 10];
    batches[0] = total;
    reference(
        "reference_sequential",
        SimMode::Sequential,
        SelectionPolicy::All,
        &batches,
    )
}

pub fn reference_sync_timebased() -> ScenarioConfig {
    reference(
        "reference_sync_timebased",
        SimMode::Sync,
        timebased(),
        &REFERENCE_BATCHES,
    )
}

pub fn reference_async_timebased() -> ScenarioConfig {
    reference(
        "reference_async_timebased",
        SimMode::Async,
        timebased(),
        &REFERENCE_BATCHES,
    )
}

pub fn reference_sync_all() -> ScenarioConfig {
    reference(
        "reference_sync_all",
        SimMode::Sync,
        SelectionPolicy::All,
        &REFERENCE_BATCHES,
    )
}

/// Random selection of 3 workers per round.
pub fn reference_random() -> ScenarioConfig {
    reference(
        "reference_random",
        SimMode::Sync,
        SelectionPolicy::Random { k: 3, seed: 11 },
        &REFERENCE_BATCHES,
    )
}

/// r-min/r-max selection started at rmin = rmax = 5 on a pool where the
/// only fast worker holds a single tiny batch and every other worker is far
/// too slow to ever fit in its window.
pub fn rminmax_stall() -> ScenarioConfig {
    let batches = [1usize; 10];
    let mut speeds = [10.0; 10];
    speeds[0] = 1.0;
    let mut cfg = reference(
        "rminmax_stall",
        SimMode::Sync,
        SelectionPolicy::RMinMax(RMinMaxState { rmin: 5.0, rmax: 5.0 }),
        &batches,
    );
    cfg.workers = pool(&speeds, &batches, REFERENCE_TRANSMIT);
    cfg.batch_size = 3;
    cfg.rounds = 50;
    cfg
}

/// Samples per batch in the table scenarios (rows 4-6 use a tenth).
pub const TABLE_BATCH: usize = 10;

fn table_row(name: &str, row: &[usize], batch_size: usize, mode: SimMode) -> ScenarioConfig {
    let n = row.len();
    let speeds: Vec<f64> = (0..n)
        .map(|i| match i * 3 / n {
            0 => 1.0,
            1 => 2.0,
            _ => 10.0,
        })
        .collect();
    let total: usize = row.iter().sum::<usize>() * batch_size;
    let per_class = total.div_ceil(10).max(1);
    ScenarioConfig {
        name: name.to_string(),
        workers: pool(&speeds, row, REFERENCE_TRANSMIT),
        selector: SelectionPolicy::All,
        policy: AggregationPolicy::FedAvg,
        mode,
        rounds: 20,
        epochs: DEFAULT_EPOCHS_PER_ROUND,
        batch_size,
        learning_rate: TrainConfig::default().learning_rate,
        unit_cost: DEFAULT_UNIT_COST,
        task: TaskSpec {
            train_per_class: per_class,
            ..reference_task()
        },
        target_accuracy: REFERENCE_TARGET,
    }
}

fn expand(groups: &[(usize, usize)]) -> Vec<usize> {
    groups
        .iter()
        .flat_map(|&(count, batches)| std::iter::repeat_n(batches, count))
        .collect()
}

/// Batch allocation of each table row, expanded to one entry per worker.
pub fn table_allocation(table: u8, row: u8) -> Option<Vec<usize>> {
    let ten =
        |w1, w23, w4, w56, w7, w810| expand(&[(1, w1), (2, w23), (1, w4), (2, w56), (1, w7), (3, w810)]);
    let thirty = |w1, w2_10, w11, w12_20, w21, w22_30| {
        expand(&[(1, w1), (9, w2_10), (1, w11), (9, w12_20), (1, w21), (9, w22_30)])
    };
    Some(match (table, row) {
        (1, 1) => ten(10, 0, 0, 0, 0, 0),
        (1, 2) => ten(1, 1, 1, 1, 1, 1),
        (1, 3) => ten(1, 0, 3, 0, 0, 2),
        (1, 4) => ten(100, 0, 0, 0, 0, 0),
        (1, 5) => ten(10, 10, 10, 10, 10, 10),
        (1, 6) => ten(10, 0, 30, 0, 0, 20),
        (2, 1) => thirty(30, 0, 0, 0, 0, 0),
        (2, 2) => thirty(1, 1, 1, 1, 1, 1),
        (2, 3) => thirty(4, 0, 8, 0, 0, 2),
        (2, 4) => thirty(300, 0, 0, 0, 0, 0),
        (2, 5) => thirty(10, 10, 10, 10, 10, 10),
        (2, 6) => thirty(40, 0, 80, 0, 0, 20),
        _ => return None,
    })
}

/// Looks up a built-in scenario by name.
pub fn builtin(name: &str) -> Option<ScenarioConfig> {
    match name {
        "reference_sequential" => return Some(reference_sequential()),
        "reference_sync_timebased" => return Some(reference_sync_timebased()),
        "reference_async_timebased" => return Some(reference_async_timebased()),
        "reference_sync_all" => return Some(reference_sync_all()),
        "reference_random" => return Some(reference_random()),
        "rminmax_stall" => return Some(rminmax_stall()),
        _ => {}
    }
    let rest = name.strip_prefix("table4_")?;
    let (table, row) = rest.split_once("_row")?;
    let table: u8 = table.parse().ok()?;
    let row: u8 = row.parse().ok()?;
    let alloc = table_allocation(table, row)?;
    // Rows 4-6 hold ten times the batches of rows 1-3; a smaller batch keeps
    // them desk-sized.
    let batch = if row >= 4 { TABLE_BATCH / 10 } else { TABLE_BATCH };
    let mode = if row == 1 || row == 4 {
        SimMode::Sequential
    } else {
        SimMode::Sync
    };
    Some(table_row(name, &alloc, batch.max(1), mode))
}

pub fn builtin_names() -> Vec<String> {
    let mut names: Vec<String> = [
        "reference_sequential",
        "reference_sync_timebased",
        "reference_async_timebased",
        "reference_sync_all",
        "reference_random",
        "rminmax_stall",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    for table in 1..=2 {
        for row in 1..=6 {
            names.push(format!("table4_{table}_row{row}"));
        }
    }
    names
}
