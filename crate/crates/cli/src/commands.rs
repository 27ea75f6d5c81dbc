use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use fednbm::experiments::{
    aggregate_table, emit_reports, read_cells_csv, run_experiment, write_coldstart, Dimension,
};
use fednbm::scada_data::{
    build_windows, clean_series, encode_features, write_scada_csv, NormalizationStats,
    TurbineSeries, RULE_NAMES,
};
use fednbm::synthdata::SynthFarmSpec;
use fednbm::{Error, Result};
use serde::Serialize;

use crate::config::{defaults_toml, RunConfig, SyntheticSource};
use crate::{Cli, Command};

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Ingest => ingest(&load_config(cli, false)?, cli.out.as_deref()),
        Command::SynthGen => synth_gen(&load_config(cli, true)?, cli.out.as_deref()),
        Command::Experiment => experiment(&load_config(cli, false)?, cli.out.as_deref()),
        Command::Coldstart { dir } => {
            let dir = dir.clone().or_else(|| cli.out.clone()).ok_or_else(|| {
                Error::Config("coldstart needs a results directory (positional or --out)".into())
            })?;
            coldstart(&dir)
        }
        Command::Defaults => {
            let text = defaults_toml();
            match &cli.out {
                Some(dir) => {
                    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                    let path = dir.join("defaults.toml");
                    fs::write(&path, text).map_err(|e| Error::io(&path, e))
                }
                None => {
                    print!("{text}");
                    Ok(())
                }
            }
        }
    }
}

/// Without `--config`, synth-gen falls back to the reference fleet.
fn load_config(cli: &Cli, synthetic_fallback: bool) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::from_file(p)?,
        None if synthetic_fallback => {
            let mut c = RunConfig::default();
            c.data.synthetic = Some(SyntheticSource::default());
            c
        }
        None => return Err(Error::Config("--config is required".into())),
    };
    cfg.finalize(cli.seed)?;
    Ok(cfg)
}

fn out_dir(cfg: &RunConfig, flag: Option<&Path>) -> Result<PathBuf> {
    flag.map(Path::to_path_buf)
        .or_else(|| cfg.out.clone())
        .ok_or_else(|| {
            Error::Config("no output directory: pass --out or set `out` in the config".into())
        })
}

#[derive(Debug, Serialize)]
struct IngestRow {
    farm_id: String,
    turbine_id: String,
    rows_read: usize,
    duplicates_dropped: usize,
    rows_in: usize,
    removed: Vec<usize>,
    rows_out: usize,
    missing_fraction: f64,
    windows: usize,
}

fn ingest(cfg: &RunConfig, out: Option<&Path>) -> Result<()> {
    let fleet = cfg.load_fleet()?;
    let window_len = cfg.plan.model.window_len;
    let mut rows = Vec::new();
    for (farm, turbines) in &fleet {
        for (series, load) in turbines {
            let (clean, report) = clean_series(series, &cfg.plan.cleaning);
            let features = encode_features(&clean, &NormalizationStats::identity());
            let windows = build_windows(
                &features,
                window_len,
                cfg.plan.window_stride,
                NormalizationStats::identity(),
                clean.id.clone(),
            )
            .len();
            rows.push(IngestRow {
                farm_id: farm.clone(),
                turbine_id: series.id.turbine_id.clone(),
                rows_read: if cfg.data.csv.is_some() {
                    load.rows_read
                } else {
                    series.len()
                },
                duplicates_dropped: load.duplicates_dropped,
                rows_in: report.rows_in,
                removed: RULE_NAMES
                    .iter()
                    .map(|r| report.removed_by_rule[*r])
                    .collect(),
                rows_out: report.rows_out,
                missing_fraction: series.missing_fraction(),
                windows,
            });
        }
    }

    let mut header = vec![
        "farm_id",
        "turbine_id",
        "rows_read",
        "duplicates_dropped",
        "rows_in",
    ];
    let removed_cols: Vec<String> = RULE_NAMES.iter().map(|r| format!("removed_{r}")).collect();
    header.extend(removed_cols.iter().map(String::as_str));
    header.extend(["rows_out", "missing_fraction", "windows"]);
    let records: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            let mut rec = vec![
                r.farm_id.clone(),
                r.turbine_id.clone(),
                r.rows_read.to_string(),
                r.duplicates_dropped.to_string(),
                r.rows_in.to_string(),
            ];
            rec.extend(r.removed.iter().map(usize::to_string));
            rec.extend([
                r.rows_out.to_string(),
                format!("{:.4}", r.missing_fraction),
                r.windows.to_string(),
            ]);
            rec
        })
        .collect();

    let mut stdout = std::io::stdout().lock();
    for (farm, turbines) in &fleet {
        let _ = writeln!(stdout, "farm {farm}: {} turbines", turbines.len());
    }
    let _ = writeln!(stdout, "{}", header.join(","));
    for rec in &records {
        let _ = writeln!(stdout, "{}", rec.join(","));
    }

    if let Some(dir) = out.map(Path::to_path_buf).or_else(|| cfg.out.clone()) {
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let path = dir.join("ingest_summary.csv");
        let mut text = header.join(",") + "\n";
        for rec in &records {
            text.push_str(&rec.join(","));
            text.push('\n');
        }
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        let _ = writeln!(stdout, "wrote {}", path.display());
    }
    Ok(())
}

#[derive(Serialize)]
struct FleetFile<'a> {
    start: NaiveDate,
    days: u32,
    farms: &'a [SynthFarmSpec],
}

fn synth_gen(cfg: &RunConfig, out: Option<&Path>) -> Result<()> {
    let dir = out_dir(cfg, out)?;
    let specs = cfg.synth_specs()?;
    let (start, days) = cfg.synth_window();
    let fleet = cfg.load_fleet()?;
    staged(&dir, |stage| {
        for turbines in fleet.values() {
            for (series, _) in turbines {
                let path = stage
                    .join(&series.id.farm_id)
                    .join(format!("{}.csv", series.id.turbine_id));
                write_scada_csv(&path, series)?;
            }
        }
        let body = toml::to_string(&FleetFile {
            start,
            days,
            farms: &specs,
        })
        .map_err(|e| Error::Config(format!("cannot serialize fleet spec: {e}")))?;
        let path = stage.join("fleet.toml");
        fs::write(&path, body).map_err(|e| Error::io(&path, e))
    })?;
    let n: usize = fleet.values().map(Vec::len).sum();
    println!(
        "wrote {} farms, {n} turbines, {days} days from {start} to {}",
        fleet.len(),
        dir.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct RunMetadata<'a> {
    command: &'static str,
    master_seed: u64,
    data: &'a crate::config::DataSource,
    /// Resolved synthetic farm specs and generation window.
    synthetic_farms: Option<Vec<SynthFarmSpec>>,
    synthetic_window: Option<(NaiveDate, u32)>,
}

fn experiment(cfg: &RunConfig, out: Option<&Path>) -> Result<()> {
    let dir = out_dir(cfg, out)?;
    let fleet: std::collections::BTreeMap<String, Vec<TurbineSeries>> = cfg
        .load_fleet()?
        .into_iter()
        .map(|(farm, v)| (farm, v.into_iter().map(|(s, _)| s).collect()))
        .collect();
    let output = run_experiment(&cfg.plan, &fleet)?;
    let synthetic = cfg.data.synthetic.is_some();
    let meta = RunMetadata {
        command: "experiment",
        master_seed: cfg.plan.master_seed,
        data: &cfg.data,
        synthetic_farms: if synthetic {
            Some(cfg.synth_specs()?)
        } else {
            None
        },
        synthetic_window: synthetic.then(|| cfg.synth_window()),
    };
    staged(&dir, |stage| {
        emit_reports(&output, &cfg.plan, &meta, stage).map(|_| ())
    })?;

    let valid = output.table.valid_cells().count();
    println!(
        "{} cells ({valid} valid) written to {}",
        output.table.len(),
        dir.display()
    );
    for (key, g) in aggregate_table(&output.table, &[Dimension::Strategy]) {
        let label = if key[1] == "true" {
            format!("{}+ft", key[0])
        } else {
            key[0].clone()
        };
        println!(
            "  {label:<16} mean MAE {:.3} °C over {} cells",
            g.mean_mae_c, g.cells
        );
    }
    Ok(())
}

fn coldstart(dir: &Path) -> Result<()> {
    let cells = dir.join("cells.csv");
    let table = read_cells_csv(&cells)?;
    if table.valid_cells().next().is_none() {
        return Err(Error::InsufficientData(format!(
            "{} has no valid cells",
            cells.display()
        )));
    }
    write_coldstart(dir, &table)?;
    let speed = dir.join("speedup.csv");
    let text = fs::read_to_string(&speed).map_err(|e| Error::io(&speed, e))?;
    print!("{text}");
    Ok(())
}

/// Writes into a scratch directory next to `dir` and moves the results in
/// only when `write` succeeds, so failures leave nothing half-written.
fn staged(dir: &Path, write: impl FnOnce(&Path) -> Result<()>) -> Result<()> {
    let parent = match dir.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    fs::create_dir_all(&parent).map_err(|e| Error::io(&parent, e))?;
    let stage = tempfile::Builder::new()
        .prefix(".fednbm-staging-")
        .tempdir_in(&parent)
        .map_err(|e| Error::io(&parent, e))?;
    write(stage.path())?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for entry in fs::read_dir(stage.path()).map_err(|e| Error::io(stage.path(), e))? {
        let entry = entry.map_err(|e| Error::io(stage.path(), e))?;
        let target = dir.join(entry.file_name());
        if target.is_dir() {
            fs::remove_dir_all(&target).map_err(|e| Error::io(&target, e))?;
        }
        fs::rename(entry.path(), &target).map_err(|e| Error::io(&target, e))?;
    }
    Ok(())
}
