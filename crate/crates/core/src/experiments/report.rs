use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use super::coldstart::{cold_start_curves, speedup_table};
use super::{ExperimentCell, ExperimentOutput, ExperimentPlan, ResultsTable};
use crate::error::{Error, Result};
use crate::fl_core::{write_round_log, StrategyKind};

pub const CELLS_HEADER: &str =
    "strategy,fine_tuned,farm_id,turbine_id,start_date,weeks,test_mae_c,train_loss,val_loss,wall_time_s,valid";
pub const COLDSTART_HEADER: &str = "strategy,fine_tuned,farm_id,days,mae_c";
pub const SPEEDUP_HEADER: &str =
    "strategy,fine_tuned,farm_id,reference_mae_c,t_star_days,speedup_days,reached";
const TRACE_HEADER: &str = "timestamp,actual_c,predicted_c";

/// Version of the report file layout, recorded in the metadata.
pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct CellRow {
    strategy: String,
    fine_tuned: bool,
    farm_id: String,
    turbine_id: String,
    start_date: NaiveDate,
    weeks: u32,
    test_mae_c: Option<f64>,
    train_loss: Option<f64>,
    val_loss: Option<f64>,
    wall_time_s: f64,
    valid: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Dimension {
    /// Strategy and fine-tuning flag together.
    Strategy,
    Farm,
    Turbine,
    StartDate,
    Weeks,
}

impl Dimension {
    fn columns(self) -> &'static [&'static str] {
        match self {
            Dimension::Strategy => &["strategy", "fine_tuned"],
            Dimension::Farm => &["farm_id"],
            Dimension::Turbine => &["farm_id", "turbine_id"],
            Dimension::StartDate => &["start_date"],
            Dimension::Weeks => &["weeks"],
        }
    }

    fn key(self, c: &ExperimentCell) -> Vec<String> {
        match self {
            Dimension::Strategy => vec![c.strategy.to_string(), c.fine_tuned.to_string()],
            Dimension::Farm => vec![c.farm_id.clone()],
            Dimension::Turbine => vec![c.farm_id.clone(), c.turbine_id.clone()],
            Dimension::StartDate => vec![c.start_date.to_string()],
            Dimension::Weeks => vec![format!("{:02}", c.weeks)],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroupMean {
    pub mean_mae_c: f64,
    pub cells: usize,
}

/// Arithmetic mean test MAE of the valid cells in each group. Groups without
/// valid cells do not appear.
pub fn aggregate_table(
    table: &ResultsTable,
    group_by: &[Dimension],
) -> BTreeMap<Vec<String>, GroupMean> {
    let mut acc: BTreeMap<Vec<String>, (f64, usize)> = BTreeMap::new();
    for c in table.valid_cells() {
        let key: Vec<String> = group_by.iter().flat_map(|d| d.key(c)).collect();
        let e = acc.entry(key).or_insert((0.0, 0));
        e.0 += c.test_mae_c.expect("valid cells carry an MAE");
        e.1 += 1;
    }
    acc.into_iter()
        .map(|(k, (sum, n))| {
            (
                k,
                GroupMean {
                    mean_mae_c: sum / n as f64,
                    cells: n,
                },
            )
        })
        .collect()
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(file))
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

fn write_header<W: Write>(w: &mut csv::Writer<W>, header: &str, path: &Path) -> Result<()> {
    w.write_record(header.split(','))
        .map_err(|e| csv_err(path, e))
}

fn finish<W: Write>(mut w: csv::Writer<W>, path: &Path) -> Result<()> {
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_cells_csv(path: &Path, table: &ResultsTable) -> Result<()> {
    let mut w = csv_writer(path)?;
    write_header(&mut w, CELLS_HEADER, path)?;
    for c in &table.cells {
        w.serialize(CellRow {
            strategy: c.strategy.to_string(),
            fine_tuned: c.fine_tuned,
            farm_id: c.farm_id.clone(),
            turbine_id: c.turbine_id.clone(),
            start_date: c.start_date,
            weeks: c.weeks,
            test_mae_c: c.test_mae_c,
            train_loss: c.train_loss,
            val_loss: c.val_loss,
            wall_time_s: c.wall_time_s,
            valid: c.valid,
        })
        .map_err(|e| csv_err(path, e))?;
    }
    finish(w, path)
}

/// Reads a cells CSV back. The header must match exactly.
pub fn read_cells_csv(path: &Path) -> Result<ResultsTable> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let header = text.lines().next().unwrap_or("");
    if header.trim_end() != CELLS_HEADER {
        return Err(Error::Format {
            path: path.to_path_buf(),
            message: format!("expected header `{CELLS_HEADER}`, found `{header}`"),
        });
    }
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let mut cells = Vec::new();
    for (i, row) in reader.deserialize::<CellRow>().enumerate() {
        let row = row.map_err(|e| csv_err(path, e))?;
        let strategy = StrategyKind::parse(&row.strategy).ok_or_else(|| Error::Format {
            path: path.to_path_buf(),
            message: format!("line {}: unknown strategy `{}`", i + 2, row.strategy),
        })?;
        if row.valid && row.test_mae_c.is_none() {
            return Err(Error::Format {
                path: path.to_path_buf(),
                message: format!("line {}: valid cell without test_mae_c", i + 2),
            });
        }
        cells.push(ExperimentCell {
            strategy,
            fine_tuned: row.fine_tuned,
            farm_id: row.farm_id,
            turbine_id: row.turbine_id,
            start_date: row.start_date,
            weeks: row.weeks,
            test_mae_c: row.test_mae_c,
            train_loss: row.train_loss,
            val_loss: row.val_loss,
            wall_time_s: row.wall_time_s,
            valid: row.valid,
            audit: None,
        });
    }
    Ok(ResultsTable::new(cells))
}

fn write_aggregate(path: &Path, table: &ResultsTable, dims: &[Dimension]) -> Result<()> {
    let mut w = csv_writer(path)?;
    let mut header: Vec<&str> = dims
        .iter()
        .flat_map(|d| d.columns().iter().copied())
        .collect();
    header.extend(["mean_mae_c", "cells"]);
    w.write_record(&header).map_err(|e| csv_err(path, e))?;
    for (key, g) in aggregate_table(table, dims) {
        let mut rec = key;
        rec.push(g.mean_mae_c.to_string());
        rec.push(g.cells.to_string());
        w.write_record(&rec).map_err(|e| csv_err(path, e))?;
    }
    finish(w, path)
}

/// Writes the cold-start curves and speed-up table derived from `table`.
pub fn write_coldstart(dir: &Path, table: &ResultsTable) -> Result<Vec<PathBuf>> {
    let curves = cold_start_curves(table);
    let path = dir.join("coldstart.csv");
    let mut w = csv_writer(&path)?;
    write_header(&mut w, COLDSTART_HEADER, &path)?;
    for c in &curves {
        for (days, mae) in &c.knots {
            w.write_record([
                c.strategy.to_string(),
                c.fine_tuned.to_string(),
                c.farm_id.clone(),
                days.to_string(),
                mae.to_string(),
            ])
            .map_err(|e| csv_err(&path, e))?;
        }
    }
    finish(w, &path)?;

    let speed_path = dir.join("speedup.csv");
    let mut w = csv_writer(&speed_path)?;
    write_header(&mut w, SPEEDUP_HEADER, &speed_path)?;
    for r in speedup_table(&curves)? {
        let s = r.speedup;
        w.write_record([
            r.strategy.to_string(),
            r.fine_tuned.to_string(),
            r.farm_id,
            s.reference_mae_c.to_string(),
            s.t_star_days.map(|t| t.to_string()).unwrap_or_default(),
            s.speedup_days.to_string(),
            s.reached.to_string(),
        ])
        .map_err(|e| csv_err(&speed_path, e))?;
    }
    finish(w, &speed_path)?;
    Ok(vec![path, speed_path])
}

#[derive(Serialize)]
struct Metadata<'a, M: Serialize> {
    tool: &'static str,
    version: &'static str,
    report_schema: u32,
    cells_header: &'static str,
    plan: &'a ExperimentPlan,
    run: &'a M,
}

/// Writes the full report set into `dir` and returns the paths written.
///
/// `run` is extra run context (data source, command line settings) stored
/// in `metadata.json` next to the plan.
pub fn emit_reports<M: Serialize>(
    output: &ExperimentOutput,
    plan: &ExperimentPlan,
    run: &M,
    dir: &Path,
) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    let table = &output.table;

    let cells = dir.join("cells.csv");
    write_cells_csv(&cells, table)?;
    written.push(cells);
    for (name, dims) in [
        ("aggregate_strategy.csv", &[Dimension::Strategy][..]),
        (
            "aggregate_strategy_farm.csv",
            &[Dimension::Strategy, Dimension::Farm][..],
        ),
        (
            "aggregate_strategy_start.csv",
            &[Dimension::Strategy, Dimension::StartDate][..],
        ),
    ] {
        let path = dir.join(name);
        write_aggregate(&path, table, dims)?;
        written.push(path);
    }
    written.extend(write_coldstart(dir, table)?);

    if !output.traces.is_empty() {
        let tdir = dir.join("traces");
        fs::create_dir_all(&tdir).map_err(|e| Error::io(&tdir, e))?;
        for t in &output.traces {
            let suffix = if t.fine_tuned { "_ft" } else { "" };
            let path = tdir.join(format!(
                "{}__{}__{}{suffix}.csv",
                t.owner.farm_id, t.owner.turbine_id, t.strategy
            ));
            let mut w = csv_writer(&path)?;
            write_header(&mut w, TRACE_HEADER, &path)?;
            for (ts, actual, pred) in &t.points {
                w.write_record([
                    ts.format("%Y-%m-%dT%H:%M:%SZ").to_string(),
                    actual.to_string(),
                    pred.to_string(),
                ])
                .map_err(|e| csv_err(&path, e))?;
            }
            finish(w, &path)?;
            written.push(path);
        }
    }

    let rounds = dir.join("rounds.jsonl");
    let file = fs::File::create(&rounds).map_err(|e| Error::io(&rounds, e))?;
    let mut w = std::io::BufWriter::new(file);
    for (name, log) in &output.rounds {
        write_round_log(&mut w, name, log).map_err(|e| Error::io(&rounds, e))?;
    }
    w.flush().map_err(|e| Error::io(&rounds, e))?;
    written.push(rounds);

    let meta = dir.join("metadata.json");
    let body = Metadata {
        tool: "fednbm",
        version: env!("CARGO_PKG_VERSION"),
        report_schema: REPORT_SCHEMA_VERSION,
        cells_header: CELLS_HEADER,
        plan,
        run,
    };
    let text = serde_json::to_string_pretty(&body).map_err(|e| Error::Format {
        path: meta.clone(),
        message: e.to_string(),
    })?;
    fs::write(&meta, text + "\n").map_err(|e| Error::io(&meta, e))?;
    written.push(meta);
    Ok(written)
}
