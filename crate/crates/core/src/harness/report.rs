//! On-disk reports. Every output directory gets `config_echo.json`,
//! `report.json` and `report.csv`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::Serialize;

use super::sweep::{SweepReport, SweepRow};
use crate::error::{Error, Result};

pub const CONFIG_ECHO_FILE: &str = "config_echo.json";
pub const REPORT_JSON_FILE: &str = "report.json";
pub const REPORT_CSV_FILE: &str = "report.csv";
pub const RUNS_CSV_FILE: &str = "runs.csv";

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(format!("{}: {e}", path.display())))
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Io(std::io::Error::other(format!("{}: {e}", path.display()))))?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

/// Aggregate rows, one per (level, mode, ratio, metric).
pub fn write_rows_csv(path: &Path, rows: &[SweepRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_err(path, e))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_rows_csv(path: &Path) -> Result<Vec<SweepRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    r.deserialize()
        .collect::<std::result::Result<Vec<SweepRow>, _>>()
        .map_err(|e| csv_err(path, e))
}

/// Two-column `metric,value` table.
pub fn write_kv_csv(path: &Path, values: &BTreeMap<String, f64>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(["metric", "value"]).map_err(|e| csv_err(path, e))?;
    for (k, v) in values {
        w.serialize((k, v)).map_err(|e| csv_err(path, e))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_kv_csv(path: &Path) -> Result<BTreeMap<String, f64>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    r.deserialize()
        .collect::<std::result::Result<BTreeMap<String, f64>, _>>()
        .map_err(|e| csv_err(path, e))
}

#[derive(Serialize)]
struct RunLine<'a> {
    level: u8,
    mode: &'a str,
    ratio: u8,
    seed: u64,
    split: &'a str,
    grouping: &'a str,
    subgroup: &'a str,
    metric: &'a str,
    value: f64,
}

/// Long table with one line per run, split, subgroup and metric. The
/// overall population is subgroup `all`; gaps are subgroup `gap`.
fn write_runs_csv(path: &Path, report: &SweepReport) -> Result<()> {
    use crate::metrics::Flatten;
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    for run in &report.runs {
        for (split, ev) in [("id", &run.result.test_id), ("ood", &run.result.test_ood)] {
            let mut lines: Vec<(&str, String, String, f64)> = Vec::new();
            for (m, v) in ev.overall.flatten() {
                lines.push(("none", "all".into(), m, v));
            }
            for fr in [&ev.by_sex, &ev.by_age] {
                let g = fr.grouping.name();
                for (m, v) in &fr.gaps {
                    lines.push((g, "gap".into(), m.name().into(), *v));
                }
                for (sub, set) in &fr.per_subgroup {
                    for (m, v) in set.flatten() {
                        lines.push((g, sub.clone(), m, v));
                    }
                }
            }
            for (grouping, subgroup, metric, value) in &lines {
                w.serialize(RunLine {
                    level: run.arm.level,
                    mode: run.arm.mode.name(),
                    ratio: run.arm.ratio,
                    seed: run.seed,
                    split,
                    grouping,
                    subgroup,
                    metric,
                    value: *value,
                })
                .map_err(|e| csv_err(path, e))?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Writes a sweep's full output directory.
pub fn write_sweep<C: Serialize>(dir: &Path, config: &C, report: &SweepReport) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_json(&dir.join(CONFIG_ECHO_FILE), config)?;
    write_json(&dir.join(REPORT_JSON_FILE), report)?;
    write_rows_csv(&dir.join(REPORT_CSV_FILE), &report.rows)?;
    write_runs_csv(&dir.join(RUNS_CSV_FILE), report)
}
