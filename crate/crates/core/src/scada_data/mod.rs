//! SCADA ingestion: loading, cleaning, feature encoding and windowing.
//!
//! Required channels that are missing in a source row are stored as `NaN`
//! and removed by [`clean_series`]. Optional channels (power, status) use
//! `Option`.

mod clean;
mod features;
mod load;

use chrono::{DateTime, Duration, Utc};
use serde::{Deserialize, Serialize};

pub use clean::{clean_series, CleaningReport, CleaningRules, CurtailmentRule, RULE_NAMES};
pub use features::{
    build_windows, chronological_split, denormalize_target, encode_features, fit_normalization,
    fit_normalization_pooled, normalize_target, ChannelStats, FeatureRow, NormalizationStats,
    WindowSample, WindowedDataset, FEATURE_CHANNELS,
};
pub use load::{
    load_fleet_dir, load_fleet_dir_with, load_scada_csv, read_scada_csv, write_scada_csv,
    ColumnSchema, LoadReport, GENERIC_HEADER,
};

/// Length of one SCADA averaging interval.
pub const STEP_SECONDS: i64 = 600;

/// Index of the 10-minute grid slot containing `ts`.
pub fn grid_index(ts: DateTime<Utc>) -> i64 {
    ts.timestamp().div_euclid(STEP_SECONDS)
}

/// Start instant of a grid slot.
pub fn grid_instant(index: i64) -> DateTime<Utc> {
    DateTime::from_timestamp(index * STEP_SECONDS, 0).expect("grid index in chrono range")
}

/// Snaps an instant to the nearest 10-minute boundary.
pub fn snap_to_grid(ts: DateTime<Utc>) -> DateTime<Utc> {
    let secs = ts.timestamp();
    let snapped = (secs + STEP_SECONDS / 2).div_euclid(STEP_SECONDS) * STEP_SECONDS;
    DateTime::from_timestamp(snapped, 0).expect("snapped timestamp in chrono range")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScadaRecord {
    pub timestamp: DateTime<Utc>,
    /// m/s
    pub wind_speed: f64,
    /// °C
    pub ambient_temp: f64,
    /// Degrees in [0, 360).
    pub wind_dir: f64,
    /// °C, the regression target.
    pub gear_bearing_temp: f64,
    /// kW
    pub power: Option<f64>,
    pub status: Option<String>,
}

impl ScadaRecord {
    pub fn new(
        timestamp: DateTime<Utc>,
        wind_speed: f64,
        ambient_temp: f64,
        wind_dir: f64,
        gear_bearing_temp: f64,
    ) -> Self {
        Self {
            timestamp,
            wind_speed,
            ambient_temp,
            wind_dir: normalize_direction(wind_dir),
            gear_bearing_temp,
            power: None,
            status: None,
        }
    }
}

/// Maps any finite angle into [0, 360).
pub fn normalize_direction(deg: f64) -> f64 {
    if !deg.is_finite() {
        return deg;
    }
    let d = deg.rem_euclid(360.0);
    // rem_euclid can round up to exactly 360 for tiny negative inputs
    if d >= 360.0 {
        0.0
    } else {
        d
    }
}

/// (farm, turbine) identity of a client.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TurbineId {
    pub farm_id: String,
    pub turbine_id: String,
}

impl TurbineId {
    pub fn new(farm_id: impl Into<String>, turbine_id: impl Into<String>) -> Self {
        Self {
            farm_id: farm_id.into(),
            turbine_id: turbine_id.into(),
        }
    }
}

impl std::fmt::Display for TurbineId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}/{}", self.farm_id, self.turbine_id)
    }
}

/// Cleaned or raw time-indexed SCADA data of one turbine.
///
/// Records are strictly increasing in time; gaps are allowed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurbineSeries {
    pub id: TurbineId,
    records: Vec<ScadaRecord>,
}

impl TurbineSeries {
    /// Builds a series from arbitrary records: timestamps are snapped to the
    /// grid, records sorted, and later duplicates dropped. Returns the number
    /// of dropped duplicates alongside.
    pub fn from_records(id: TurbineId, mut records: Vec<ScadaRecord>) -> (Self, usize) {
        for r in &mut records {
            r.timestamp = snap_to_grid(r.timestamp);
            r.wind_dir = normalize_direction(r.wind_dir);
        }
        // stable sort keeps file order among equal timestamps
        records.sort_by_key(|r| r.timestamp);
        let before = records.len();
        records.dedup_by(|later, earlier| later.timestamp == earlier.timestamp);
        let dropped = before - records.len();
        (Self { id, records }, dropped)
    }

    pub fn records(&self) -> &[ScadaRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn first_timestamp(&self) -> Option<DateTime<Utc>> {
        self.records.first().map(|r| r.timestamp)
    }

    pub fn last_timestamp(&self) -> Option<DateTime<Utc>> {
        self.records.last().map(|r| r.timestamp)
    }

    /// Records whose timestamp lies in `range`.
    pub fn slice(&self, range: TimeRange) -> &[ScadaRecord] {
        let lo = self.records.partition_point(|r| r.timestamp < range.start);
        let hi = self.records.partition_point(|r| r.timestamp < range.end);
        &self.records[lo..hi]
    }

    /// A new series holding only the records in `range`.
    pub fn restricted(&self, range: TimeRange) -> TurbineSeries {
        TurbineSeries {
            id: self.id.clone(),
            records: self.slice(range).to_vec(),
        }
    }

    /// Fraction of grid slots between the first and last record that are absent.
    pub fn missing_fraction(&self) -> f64 {
        match (self.first_timestamp(), self.last_timestamp()) {
            (Some(a), Some(b)) => {
                let expected = (grid_index(b) - grid_index(a) + 1) as f64;
                1.0 - self.records.len() as f64 / expected
            }
            _ => 1.0,
        }
    }

    pub(crate) fn from_sorted_unchecked(id: TurbineId, records: Vec<ScadaRecord>) -> Self {
        debug_assert!(records.windows(2).all(|w| w[0].timestamp < w[1].timestamp));
        Self { id, records }
    }
}

/// Half-open time interval `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimeRange {
    pub start: DateTime<Utc>,
    pub end: DateTime<Utc>,
}

impl TimeRange {
    pub fn new(start: DateTime<Utc>, end: DateTime<Utc>) -> Self {
        Self { start, end }
    }

    pub fn from_days(start: DateTime<Utc>, days: i64) -> Self {
        Self {
            start,
            end: start + Duration::days(days),
        }
    }

    pub fn contains(&self, ts: DateTime<Utc>) -> bool {
        self.start <= ts && ts < self.end
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }

    pub fn overlaps(&self, other: &TimeRange) -> bool {
        self.start < other.end && other.start < self.end
    }

    pub fn days(&self) -> f64 {
        (self.end - self.start).num_seconds() as f64 / 86_400.0
    }
}
