//! Per-round records and their CSV form.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::aggregation::WorkerId;
use crate::error::{Error, Result};
use crate::orchestrator::coordinator::ConsumedResponse;

pub const CSV_HEADER: &str = "round,started_at,finished_at,accuracy,selected,responses_used";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    /// Server version after this round.
    pub round_index: u64,
    pub started_at: f64,
    pub finished_at: f64,
    pub accuracy: f64,
    pub selected: BTreeSet<WorkerId>,
    pub responses_used: usize,
}

/// Formats `x` with ten significant digits.
pub fn format_accuracy(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return format!("{x}");
    }
    let magnitude = x.abs().log10().floor() as i32;
    let decimals = (9 - magnitude).max(0) as usize;
    format!("{x:.decimals$}")
}

pub fn export_records(records: &[RoundRecord]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in records {
        let selected: Vec<String> = r.selected.iter().map(|w| w.0.to_string()).collect();
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.round_index,
            r.started_at,
            r.finished_at,
            format_accuracy(r.accuracy),
            selected.join(";"),
            r.responses_used
        );
    }
    out
}

fn field<'a>(cols: &[&'a str], i: usize, line: usize) -> Result<&'a str> {
    cols.get(i)
        .copied()
        .ok_or_else(|| Error::Parse(format!("line {line}: missing column {i}")))
}

fn number<T: std::str::FromStr>(s: &str, name: &str, line: usize) -> Result<T> {
    s.trim()
        .parse()
        .map_err(|_| Error::Parse(format!("line {line}: bad {name} {s:?}")))
}

/// Parses text produced by [`export_records`].
pub fn parse_records(csv: &str) -> Result<Vec<RoundRecord>> {
    let mut lines = csv.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == CSV_HEADER => {}
        Some((_, h)) => return Err(Error::Parse(format!("line 1: unexpected header {h:?}"))),
        None => return Err(Error::Parse("empty input".into())),
    }
    let mut out = Vec::new();
    for (i, line) in lines {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 6 {
            return Err(Error::Parse(format!(
                "line {line_no}: expected 6 columns, got {}",
                cols.len()
            )));
        }
        let selected_col = field(&cols, 4, line_no)?.trim();
        let selected = if selected_col.is_empty() {
            BTreeSet::new()
        } else {
            selected_col
                .split(';')
                .map(|s| number::<u32>(s, "worker id", line_no).map(WorkerId))
                .collect::<Result<_>>()?
        };
        out.push(RoundRecord {
            round_index: number(field(&cols, 0, line_no)?, "round", line_no)?,
            started_at: number(field(&cols, 1, line_no)?, "started_at", line_no)?,
            finished_at: number(field(&cols, 2, line_no)?, "finished_at", line_no)?,
            accuracy: number(field(&cols, 3, line_no)?, "accuracy", line_no)?,
            selected,
            responses_used: number(field(&cols, 5, line_no)?, "responses_used", line_no)?,
        });
    }
    Ok(out)
}

pub const CONSUMED_HEADER: &str = "round,worker,base_version,dispatch_version,aggregated_at_version";

/// One line per response that went into an aggregation.
pub fn export_consumed(consumed: &[ConsumedResponse]) -> String {
    let mut out = String::from(CONSUMED_HEADER);
    out.push('\n');
    for c in consumed {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            c.round, c.worker.0, c.base_version, c.dispatch_version, c.aggregated_at_version
        );
    }
    out
}
