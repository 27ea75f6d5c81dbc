//! Experiment harness: the start-date x training-weeks x strategy grid, MAE
//! tables, cold-start curves and report files.

mod coldstart;
mod report;

use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use chrono::{DateTime, Duration, NaiveDate, Utc};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fl_core::{
    run_strategy, ClientHandle, FederationConfig, FineTuneConfig, RoundResult, StrategyKind,
    StrategySpec,
};
use crate::nbm::{evaluate_loss, evaluate_mae, predict, ModelConfig, ModelParameters, TrainConfig};
use crate::scada_data::{
    build_windows, chronological_split, clean_series, denormalize_target, encode_features,
    fit_normalization, fit_normalization_pooled, CleaningRules, NormalizationStats, TimeRange,
    TurbineId, TurbineSeries, WindowedDataset,
};
use crate::seed::derive_seed;

pub use coldstart::{
    cold_start_curves, cold_start_speedup, speedup_table, ColdStartCurve, SpeedUp, SpeedUpRow,
    ALL_FARMS,
};
pub use report::{
    aggregate_table, emit_reports, read_cells_csv, write_cells_csv, write_coldstart, Dimension,
    GroupMean, CELLS_HEADER, COLDSTART_HEADER, SPEEDUP_HEADER,
};

pub const MAX_WEEKS: u32 = 12;

fn default_start_dates() -> Vec<NaiveDate> {
    [(2016, 12, 1), (2017, 3, 1), (2017, 6, 1), (2017, 9, 1)]
        .into_iter()
        .map(|(y, m, d)| NaiveDate::from_ymd_opt(y, m, d).expect("valid date"))
        .collect()
}

fn default_strategies() -> Vec<StrategySpec> {
    vec![
        StrategySpec::new(StrategyKind::Local, false),
        StrategySpec::new(StrategyKind::IntraFarm, false),
        StrategySpec::new(StrategyKind::IntraFarm, true),
        StrategySpec::new(StrategyKind::InterFarm, false),
        StrategySpec::new(StrategyKind::InterFarm, true),
    ]
}

/// Which records the normalization statistics of a cell are fitted on.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormalizationScope {
    /// Each turbine's own training slice.
    #[default]
    PerTurbine,
    /// The training slices of every turbine in the fleet, pooled. For
    /// comparison only: it needs statistics from every client.
    Global,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentPlan {
    pub start_dates: Vec<NaiveDate>,
    /// Training-range lengths in weeks, strictly increasing, within 1..=12.
    pub weeks: Vec<u32>,
    /// The test window starts this many weeks after the start date.
    pub test_offset_weeks: u32,
    pub test_weeks: u32,
    /// Keep one window in `window_stride` grid steps (train and test alike).
    pub window_stride: usize,
    pub train_fraction: f64,
    pub normalization: NormalizationScope,
    pub strategies: Vec<StrategySpec>,
    pub model: ModelConfig,
    /// Template for every client; its seed is replaced per client and cell.
    pub train: TrainConfig,
    /// Its `init_seed` is replaced per cell.
    pub federation: FederationConfig,
    pub cleaning: CleaningRules,
    pub master_seed: u64,
    /// Write prediction traces for the first start date at the longest range.
    pub traces: bool,
    /// Measure wall time per cell; off by default so reruns are byte-identical.
    pub record_wall_time: bool,
}

impl Default for ExperimentPlan {
    fn default() -> Self {
        Self {
            start_dates: default_start_dates(),
            weeks: (1..=MAX_WEEKS).collect(),
            test_offset_weeks: 12,
            test_weeks: 4,
            window_stride: 1,
            train_fraction: 0.8,
            normalization: NormalizationScope::PerTurbine,
            strategies: default_strategies(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            federation: FederationConfig::default(),
            cleaning: CleaningRules::default(),
            master_seed: 0,
            traces: true,
            record_wall_time: false,
        }
    }
}

impl ExperimentPlan {
    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(Error::Config(m));
        if self.start_dates.is_empty() {
            return cfg("plan.start_dates must not be empty".into());
        }
        let distinct: BTreeSet<_> = self.start_dates.iter().collect();
        if distinct.len() != self.start_dates.len() {
            return cfg("plan.start_dates contains duplicates".into());
        }
        if self.weeks.is_empty() {
            return cfg("plan.weeks must not be empty".into());
        }
        for &w in &self.weeks {
            if !(1..=MAX_WEEKS).contains(&w) {
                return cfg(format!("plan.weeks: {w} outside 1..={MAX_WEEKS}"));
            }
        }
        if self.weeks.windows(2).any(|p| p[0] >= p[1]) {
            return cfg("plan.weeks must be strictly increasing".into());
        }
        let longest = *self.weeks.last().expect("non-empty");
        if self.test_offset_weeks < longest {
            return cfg(format!(
                "plan.test_offset_weeks ({}) must be >= the longest training range ({longest})",
                self.test_offset_weeks
            ));
        }
        if self.test_weeks == 0 {
            return cfg("plan.test_weeks must be >= 1".into());
        }
        if self.window_stride == 0 {
            return cfg("plan.window_stride must be >= 1".into());
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return cfg(format!(
                "plan.train_fraction {} outside (0, 1)",
                self.train_fraction
            ));
        }
        if self.strategies.is_empty() {
            return cfg("plan.strategies must not be empty".into());
        }
        let mut seen = BTreeSet::new();
        for s in &self.strategies {
            if !seen.insert((s.kind, s.fine_tune)) {
                return cfg(format!(
                    "plan.strategies lists {} (fine_tune = {}) twice",
                    s.kind, s.fine_tune
                ));
            }
            s.fine_tune_config.validate()?;
        }
        self.model.validate()?;
        self.train.validate()?;
        self.federation.validate()?;
        Ok(())
    }

    pub fn test_range(&self, start: DateTime<Utc>) -> TimeRange {
        TimeRange::from_days(
            start + Duration::weeks(self.test_offset_weeks as i64),
            7 * self.test_weeks as i64,
        )
    }

    /// Days of data each turbine needs from the earliest start date.
    pub fn horizon_days(&self) -> i64 {
        7 * (self.test_offset_weeks + self.test_weeks) as i64
    }
}

pub fn start_instant(date: NaiveDate) -> DateTime<Utc> {
    date.and_hms_opt(0, 0, 0)
        .expect("midnight exists")
        .and_utc()
}

/// `[start, start + 7 * weeks days)`.
pub fn slice_training(start: DateTime<Utc>, weeks: u32) -> Result<TimeRange> {
    if !(1..=MAX_WEEKS).contains(&weeks) {
        return Err(Error::contract(format!(
            "training range of {weeks} weeks outside 1..={MAX_WEEKS}"
        )));
    }
    Ok(TimeRange::from_days(start, 7 * weeks as i64))
}

/// Seed of the initial global model (and of every Local model) in a cell.
pub fn cell_init_seed(master: u64, date: NaiveDate, weeks: u32) -> u64 {
    derive_seed(master, &["init", &date.to_string(), &weeks.to_string()])
}

pub fn client_seed(master: u64, id: &TurbineId, date: NaiveDate, weeks: u32) -> u64 {
    derive_seed(
        master,
        &[
            "client",
            &id.farm_id,
            &id.turbine_id,
            &date.to_string(),
            &weeks.to_string(),
        ],
    )
}

/// Per-turbine datasets of one cell.
#[derive(Debug, Clone)]
pub struct PreparedTurbine {
    pub train: WindowedDataset,
    pub val: WindowedDataset,
    pub test: WindowedDataset,
    pub stats: NormalizationStats,
    pub train_range: TimeRange,
    pub test_range: TimeRange,
}

/// Fits normalization on the training slice, windows it, splits it
/// chronologically, and windows the test interval with the same statistics.
pub fn prepare_turbine(
    series: &TurbineSeries,
    date: NaiveDate,
    weeks: u32,
    plan: &ExperimentPlan,
) -> Result<PreparedTurbine> {
    let train_range = slice_training(start_instant(date), weeks)?;
    let stats = fit_normalization(series, train_range)?;
    prepare_turbine_with_stats(series, date, weeks, plan, stats)
}

/// As [`prepare_turbine`] with statistics fitted elsewhere.
pub fn prepare_turbine_with_stats(
    series: &TurbineSeries,
    date: NaiveDate,
    weeks: u32,
    plan: &ExperimentPlan,
    stats: NormalizationStats,
) -> Result<PreparedTurbine> {
    let start = start_instant(date);
    let train_range = slice_training(start, weeks)?;
    let test_range = plan.test_range(start);
    let window = |range: TimeRange| {
        let rows = encode_features(&series.restricted(range), &stats);
        build_windows(
            &rows,
            plan.model.window_len,
            plan.window_stride,
            stats,
            series.id.clone(),
        )
    };
    let (train, val) = chronological_split(&window(train_range), plan.train_fraction)?;
    let test = window(test_range);
    Ok(PreparedTurbine {
        train,
        val,
        test,
        stats,
        train_range,
        test_range,
    })
}

/// Evidence that a cell's test data is strictly later than its training data.
#[derive(Debug, Clone, PartialEq)]
pub struct LeakageAudit {
    pub train_range: TimeRange,
    pub test_range: TimeRange,
    /// The interval the normalization statistics were fitted on.
    pub stats_range: TimeRange,
    pub last_train_end: Option<DateTime<Utc>>,
    pub first_test_start: Option<DateTime<Utc>>,
    pub first_test_end: Option<DateTime<Utc>>,
}

impl LeakageAudit {
    pub fn check(&self) -> Result<()> {
        let fail = |m: String| Err(Error::contract(format!("leakage: {m}")));
        if self.stats_range != self.train_range {
            return fail("normalization fitted outside the training slice".into());
        }
        if self.train_range.overlaps(&self.test_range) {
            return fail("training and test intervals overlap".into());
        }
        if let Some(end) = self.last_train_end {
            if !self.train_range.contains(end) {
                return fail(format!(
                    "training window ending {end} outside the training slice"
                ));
            }
        }
        if let Some(first) = self.first_test_end {
            if first < self.train_range.end {
                return fail(format!(
                    "test window ending {first} before the training slice ends"
                ));
            }
        }
        if let Some(first) = self.first_test_start {
            if first < self.test_range.start {
                return fail(format!(
                    "test window starting {first} before the test interval"
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentCell {
    pub strategy: StrategyKind,
    pub fine_tuned: bool,
    pub farm_id: String,
    pub turbine_id: String,
    pub start_date: NaiveDate,
    pub weeks: u32,
    pub test_mae_c: Option<f64>,
    /// Final model loss on the normalized training windows.
    pub train_loss: Option<f64>,
    pub val_loss: Option<f64>,
    pub wall_time_s: f64,
    /// False when the turbine lacked training or test windows.
    pub valid: bool,
    /// Not serialized; absent for cells read back from CSV.
    pub audit: Option<LeakageAudit>,
}

impl ExperimentCell {
    fn sort_key(&self) -> (StrategyKind, bool, &str, &str, NaiveDate, u32) {
        (
            self.strategy,
            self.fine_tuned,
            &self.farm_id,
            &self.turbine_id,
            self.start_date,
            self.weeks,
        )
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ResultsTable {
    pub cells: Vec<ExperimentCell>,
}

impl ResultsTable {
    pub fn new(mut cells: Vec<ExperimentCell>) -> Self {
        cells.sort_by(|a, b| a.sort_key().cmp(&b.sort_key()));
        Self { cells }
    }

    pub fn valid_cells(&self) -> impl Iterator<Item = &ExperimentCell> {
        self.cells.iter().filter(|c| c.valid)
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }
}

/// Test-window predictions of one deliverable model.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionTrace {
    pub strategy: StrategyKind,
    pub fine_tuned: bool,
    pub owner: TurbineId,
    pub start_date: NaiveDate,
    pub weeks: u32,
    /// (window end, actual °C, predicted °C)
    pub points: Vec<(DateTime<Utc>, f64, f64)>,
}

#[derive(Debug, Clone, Default)]
pub struct ExperimentOutput {
    pub table: ResultsTable,
    /// Round logs keyed by "<start date>/w<weeks>/<federation>".
    pub rounds: Vec<(String, Vec<RoundResult>)>,
    pub traces: Vec<PredictionTrace>,
}

fn check_fleet(fleet: &BTreeMap<String, Vec<TurbineSeries>>) -> Result<()> {
    if fleet.values().all(Vec::is_empty) {
        return Err(Error::InsufficientData(
            "the fleet holds no turbines".into(),
        ));
    }
    let mut seen = BTreeSet::new();
    for (farm, turbines) in fleet {
        for s in turbines {
            if &s.id.farm_id != farm {
                return Err(Error::contract(format!(
                    "turbine {} listed under farm {farm}",
                    s.id
                )));
            }
            if !seen.insert(s.id.clone()) {
                return Err(Error::contract(format!("turbine {} appears twice", s.id)));
            }
        }
    }
    Ok(())
}

/// Trains and evaluates every (start date, weeks, strategy, turbine) cell.
///
/// Cell groups run in parallel on the current rayon pool; outputs do not
/// depend on the pool size or on the order of turbines within a farm.
pub fn run_experiment(
    plan: &ExperimentPlan,
    fleet: &BTreeMap<String, Vec<TurbineSeries>>,
) -> Result<ExperimentOutput> {
    plan.validate()?;
    check_fleet(fleet)?;
    let mut cleaned: Vec<TurbineSeries> = fleet
        .values()
        .flatten()
        .map(|s| {
            let (c, report) = clean_series(s, &plan.cleaning);
            if report.removed() > 0 {
                log::info!(
                    "{}: cleaning removed {} of {} rows",
                    s.id,
                    report.removed(),
                    report.rows_in
                );
            }
            c
        })
        .collect();
    cleaned.sort_by(|a, b| a.id.cmp(&b.id));

    let combos: Vec<(NaiveDate, u32)> = plan
        .start_dates
        .iter()
        .flat_map(|&d| plan.weeks.iter().map(move |&w| (d, w)))
        .collect();
    let groups: Vec<ExperimentOutput> = combos
        .par_iter()
        .map(|&(date, weeks)| run_group(plan, &cleaned, date, weeks))
        .collect::<Result<_>>()?;

    let mut cells = Vec::new();
    let mut out = ExperimentOutput::default();
    for g in groups {
        cells.extend(g.table.cells);
        out.rounds.extend(g.rounds);
        out.traces.extend(g.traces);
    }
    for c in &cells {
        if let Some(a) = &c.audit {
            a.check()?;
        }
    }
    out.table = ResultsTable::new(cells);
    Ok(out)
}

fn run_group(
    plan: &ExperimentPlan,
    fleet: &[TurbineSeries],
    date: NaiveDate,
    weeks: u32,
) -> Result<ExperimentOutput> {
    let mut prepared: BTreeMap<TurbineId, PreparedTurbine> = BTreeMap::new();
    let mut farms: BTreeMap<String, Vec<ClientHandle>> = BTreeMap::new();
    let pooled = match plan.normalization {
        NormalizationScope::PerTurbine => None,
        NormalizationScope::Global => Some(fit_normalization_pooled(
            fleet,
            slice_training(start_instant(date), weeks)?,
        )),
    };
    for s in fleet {
        let prepared_turbine = match &pooled {
            None => prepare_turbine(s, date, weeks, plan),
            Some(Ok(stats)) => prepare_turbine_with_stats(s, date, weeks, plan, *stats),
            Some(Err(e)) => Err(Error::InsufficientData(e.to_string())),
        };
        match prepared_turbine {
            Ok(p) => {
                let train = TrainConfig {
                    seed: client_seed(plan.master_seed, &s.id, date, weeks),
                    proximal: None,
                    ..plan.train.clone()
                };
                let client = ClientHandle::new(p.train.clone(), p.val.clone(), train)?;
                farms.entry(s.id.farm_id.clone()).or_default().push(client);
                if p.test.is_empty() {
                    log::warn!("{} {date} w{weeks}: no test windows, cell invalid", s.id);
                }
                prepared.insert(s.id.clone(), p);
            }
            Err(e) if e.is_data_error() => {
                log::warn!("{} {date} w{weeks}: skipped, {e}", s.id);
            }
            Err(e) => return Err(e),
        }
    }

    let fed = FederationConfig {
        init_seed: cell_init_seed(plan.master_seed, date, weeks),
        ..plan.federation.clone()
    };
    let is_trace_cell =
        plan.traces && Some(&date) == plan.start_dates.first() && Some(&weeks) == plan.weeks.last();
    let mut out = ExperimentOutput::default();
    let mut cells = Vec::new();
    for kind in StrategyKind::ALL {
        let specs: Vec<&StrategySpec> = plan.strategies.iter().filter(|s| s.kind == kind).collect();
        if specs.is_empty() {
            continue;
        }
        let clock = Instant::now();
        let outcome = if farms.is_empty() {
            None
        } else {
            let tuned = specs.iter().find(|s| s.fine_tune);
            let run_spec = StrategySpec {
                kind,
                fine_tune: tuned.is_some(),
                fine_tune_config: tuned
                    .map_or_else(FineTuneConfig::default, |s| s.fine_tune_config.clone()),
            };
            Some(run_strategy(&run_spec, &farms, &plan.model, &fed)?)
        };
        if let Some(o) = &outcome {
            for f in &o.federations {
                out.rounds
                    .push((format!("{date}/w{weeks}/{}", f.name), f.rounds.clone()));
            }
        }
        for spec in &specs {
            let models: Option<&BTreeMap<TurbineId, ModelParameters>> = outcome.as_ref().map(|o| {
                if spec.fine_tune {
                    o.fine_tuned.as_ref().expect("fine-tuned models requested")
                } else {
                    &o.base_models
                }
            });
            for s in fleet {
                let mut cell = ExperimentCell {
                    strategy: kind,
                    fine_tuned: spec.fine_tune,
                    farm_id: s.id.farm_id.clone(),
                    turbine_id: s.id.turbine_id.clone(),
                    start_date: date,
                    weeks,
                    test_mae_c: None,
                    train_loss: None,
                    val_loss: None,
                    wall_time_s: 0.0,
                    valid: false,
                    audit: None,
                };
                let (Some(p), Some(model)) =
                    (prepared.get(&s.id), models.and_then(|m| m.get(&s.id)))
                else {
                    cells.push(cell);
                    continue;
                };
                cell.audit = Some(LeakageAudit {
                    train_range: p.train_range,
                    test_range: p.test_range,
                    stats_range: p.train_range,
                    last_train_end: p.val.last_end().or(p.train.last_end()),
                    first_test_start: p
                        .test
                        .first_end()
                        .map(|e| e - Duration::minutes(10 * (plan.model.window_len as i64 - 1))),
                    first_test_end: p.test.first_end(),
                });
                cell.train_loss = Some(evaluate_loss(model, &p.train, plan.train.loss)?);
                if !p.val.is_empty() {
                    cell.val_loss = Some(evaluate_loss(model, &p.val, plan.train.loss)?);
                }
                if !p.test.is_empty() {
                    cell.test_mae_c = Some(evaluate_mae(model, &p.test)?);
                    cell.valid = true;
                    if is_trace_cell {
                        out.traces.push(prediction_trace(
                            kind,
                            spec.fine_tune,
                            model,
                            &p.test,
                            date,
                            weeks,
                        )?);
                    }
                }
                cells.push(cell);
            }
        }
        if plan.record_wall_time {
            let per_cell = clock.elapsed().as_secs_f64() / fleet.len().max(1) as f64;
            let n = specs.len() * fleet.len();
            let len = cells.len();
            for c in &mut cells[len - n..] {
                c.wall_time_s = per_cell;
            }
        }
    }
    out.table = ResultsTable { cells };
    Ok(out)
}

pub fn prediction_trace(
    strategy: StrategyKind,
    fine_tuned: bool,
    model: &ModelParameters,
    test: &WindowedDataset,
    start_date: NaiveDate,
    weeks: u32,
) -> Result<PredictionTrace> {
    let preds = predict(model, test)?;
    let points = test
        .samples
        .iter()
        .zip(preds)
        .map(|(s, p)| {
            (
                s.end_timestamp,
                denormalize_target(s.target, &test.stats),
                denormalize_target(p, &test.stats),
            )
        })
        .collect();
    Ok(PredictionTrace {
        strategy,
        fine_tuned,
        owner: test.owner.clone(),
        start_date,
        weeks,
        points,
    })
}
