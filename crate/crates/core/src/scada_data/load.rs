use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use chrono::{DateTime, NaiveDateTime, Utc};
use serde::{Deserialize, Serialize};

use super::{ScadaRecord, TurbineId, TurbineSeries};
use crate::error::{Error, Result, RowError};

/// Header of the generic SCADA CSV layout.
pub const GENERIC_HEADER: &str =
    "timestamp,wind_speed_mps,ambient_temp_c,wind_dir_deg,gear_bearing_temp_c,power_kw,status";

const MAX_ROW_ERRORS: usize = 100;

/// Maps logical SCADA channels onto the column names of a source file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ColumnSchema {
    pub name: String,
    pub timestamp: String,
    pub wind_speed: String,
    pub ambient_temp: String,
    pub wind_dir: String,
    pub gear_bearing_temp: String,
    #[serde(default)]
    pub power: Option<String>,
    #[serde(default)]
    pub status: Option<String>,
    /// Column holding the turbine identifier when one file covers many turbines.
    #[serde(default)]
    pub turbine: Option<String>,
    /// chrono format string for naive UTC timestamps; RFC 3339 and common
    /// ISO-8601 variants are tried when absent.
    #[serde(default)]
    pub timestamp_format: Option<String>,
    /// Lines before the header that do not contain the timestamp column name
    /// are skipped (vendor exports carry comment preambles).
    #[serde(default)]
    pub skip_preamble: bool,
}

impl ColumnSchema {
    pub fn generic() -> Self {
        Self {
            name: "generic".into(),
            timestamp: "timestamp".into(),
            wind_speed: "wind_speed_mps".into(),
            ambient_temp: "ambient_temp_c".into(),
            wind_dir: "wind_dir_deg".into(),
            gear_bearing_temp: "gear_bearing_temp_c".into(),
            power: Some("power_kw".into()),
            status: Some("status".into()),
            turbine: None,
            timestamp_format: None,
            skip_preamble: false,
        }
    }

    /// Greenbyte-style export used by the Penmanshiel and Kelmarsh open datasets.
    fn greenbyte(name: &str) -> Self {
        Self {
            name: name.into(),
            timestamp: "# Date and time".into(),
            wind_speed: "Wind speed (m/s)".into(),
            ambient_temp: "Nacelle ambient temperature (°C)".into(),
            wind_dir: "Wind direction (°)".into(),
            gear_bearing_temp: "Gear bearing temperature, high speed side (°C)".into(),
            power: Some("Power (kW)".into()),
            status: None,
            turbine: None,
            timestamp_format: Some("%Y-%m-%d %H:%M:%S".into()),
            skip_preamble: true,
        }
    }

    pub fn penmanshiel() -> Self {
        Self::greenbyte("penmanshiel")
    }

    pub fn kelmarsh() -> Self {
        Self::greenbyte("kelmarsh")
    }

    /// EDP open-data layout: one file per farm-year with a turbine column.
    pub fn edp() -> Self {
        Self {
            name: "edp".into(),
            timestamp: "Timestamp".into(),
            wind_speed: "Amb_WindSpeed_Avg".into(),
            ambient_temp: "Amb_Temp_Avg".into(),
            wind_dir: "Amb_WindDir_Abs_Avg".into(),
            gear_bearing_temp: "Gear_Bear_Temp_Avg".into(),
            power: Some("Grd_Prod_Pwr_Avg".into()),
            status: None,
            turbine: Some("Turbine_ID".into()),
            timestamp_format: None,
            skip_preamble: false,
        }
    }

    /// Looks up a built-in adapter by name.
    pub fn named(name: &str) -> Option<Self> {
        match name.to_ascii_lowercase().as_str() {
            "generic" => Some(Self::generic()),
            "penmanshiel" => Some(Self::penmanshiel()),
            "kelmarsh" => Some(Self::kelmarsh()),
            "edp" => Some(Self::edp()),
            _ => None,
        }
    }

    /// Reads a column-mapping file (TOML with the same keys as this struct).
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Resolves a built-in adapter name or a mapping file path.
    pub fn resolve(name_or_path: &str) -> Result<Self> {
        if let Some(s) = Self::named(name_or_path) {
            return Ok(s);
        }
        let p = Path::new(name_or_path);
        if p.exists() {
            Self::from_file(p)
        } else {
            Err(Error::Config(format!(
                "unknown schema adapter `{name_or_path}` (expected generic, penmanshiel, kelmarsh, edp or a mapping file)"
            )))
        }
    }
}

/// Bookkeeping from a CSV load.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LoadReport {
    pub rows_read: usize,
    pub duplicates_dropped: usize,
}

struct Columns {
    timestamp: usize,
    wind_speed: usize,
    ambient_temp: usize,
    wind_dir: usize,
    gear_bearing_temp: usize,
    power: Option<usize>,
    status: Option<usize>,
    turbine: Option<usize>,
}

fn locate(headers: &csv::StringRecord, schema: &ColumnSchema) -> Result<Columns> {
    let find = |name: &str| headers.iter().position(|h| h.trim() == name.trim());
    let required = |name: &str| {
        find(name).ok_or_else(|| Error::MissingColumn {
            column: name.to_string(),
        })
    };
    // optional channels that are mapped but absent are treated as unavailable
    Ok(Columns {
        timestamp: required(&schema.timestamp)?,
        wind_speed: required(&schema.wind_speed)?,
        ambient_temp: required(&schema.ambient_temp)?,
        wind_dir: required(&schema.wind_dir)?,
        gear_bearing_temp: required(&schema.gear_bearing_temp)?,
        power: schema.power.as_deref().and_then(find),
        status: schema.status.as_deref().and_then(find),
        turbine: match schema.turbine.as_deref() {
            Some(t) => Some(required(t)?),
            None => None,
        },
    })
}

fn parse_timestamp(raw: &str, format: Option<&str>) -> Option<DateTime<Utc>> {
    let raw = raw.trim();
    if let Some(fmt) = format {
        return NaiveDateTime::parse_from_str(raw, fmt)
            .ok()
            .map(|n| n.and_utc())
            .or_else(|| DateTime::parse_from_rfc3339(raw).ok().map(|d| d.to_utc()));
    }
    if let Ok(d) = DateTime::parse_from_rfc3339(raw) {
        return Some(d.to_utc());
    }
    for fmt in [
        "%Y-%m-%d %H:%M:%S",
        "%Y-%m-%dT%H:%M:%S",
        "%Y-%m-%d %H:%M",
        "%Y-%m-%dT%H:%M",
        "%Y-%m-%d %H:%M:%S%.f",
        "%Y-%m-%dT%H:%M:%S%.f",
    ] {
        if let Ok(n) = NaiveDateTime::parse_from_str(raw, fmt) {
            return Some(n.and_utc());
        }
    }
    None
}

/// Missing values (empty, NaN, NA) parse to NaN; anything else must be numeric.
fn parse_value(raw: &str) -> std::result::Result<f64, String> {
    let t = raw.trim();
    if t.is_empty() || t.eq_ignore_ascii_case("nan") || t.eq_ignore_ascii_case("na") {
        return Ok(f64::NAN);
    }
    t.parse::<f64>().map_err(|_| format!("not a number: `{t}`"))
}

fn parse_optional(raw: Option<&str>) -> std::result::Result<Option<f64>, String> {
    match raw {
        None => Ok(None),
        Some(r) => parse_value(r).map(|v| if v.is_nan() { None } else { Some(v) }),
    }
}

/// Reads a SCADA CSV that may hold several turbines (when the schema maps a
/// turbine column) and returns one sorted, deduplicated series per turbine.
pub fn read_scada_csv(
    path: &Path,
    schema: &ColumnSchema,
    farm_id: &str,
    default_turbine: &str,
) -> Result<Vec<(TurbineSeries, LoadReport)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut skipped_lines = 0u64;
    let mut body: &str = &text;
    if schema.skip_preamble {
        loop {
            let (line, rest) = match body.find('\n') {
                Some(i) => (&body[..i], &body[i + 1..]),
                None => (body, ""),
            };
            if line.contains(schema.timestamp.as_str()) || rest.is_empty() {
                break;
            }
            body = rest;
            skipped_lines += 1;
        }
    }

    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(body.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| Error::Format {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?
        .clone();
    let cols = locate(&headers, schema)?;

    let mut errors = Vec::new();
    let mut grouped: BTreeMap<String, Vec<ScadaRecord>> = BTreeMap::new();
    let mut rows_read: BTreeMap<String, usize> = BTreeMap::new();

    for (i, row) in reader.records().enumerate() {
        let line = skipped_lines + i as u64 + 2;
        let row = match row {
            Ok(r) => r,
            Err(e) => {
                errors.push(RowError {
                    line,
                    message: e.to_string(),
                });
                if errors.len() >= MAX_ROW_ERRORS {
                    break;
                }
                continue;
            }
        };
        let field = |idx: usize| row.get(idx).unwrap_or("");
        let parsed = (|| -> std::result::Result<(String, ScadaRecord), String> {
            let ts_raw = field(cols.timestamp);
            let timestamp = parse_timestamp(ts_raw, schema.timestamp_format.as_deref())
                .ok_or_else(|| format!("unparseable timestamp `{}`", ts_raw.trim()))?;
            let mut rec = ScadaRecord::new(
                timestamp,
                parse_value(field(cols.wind_speed))?,
                parse_value(field(cols.ambient_temp))?,
                parse_value(field(cols.wind_dir))?,
                parse_value(field(cols.gear_bearing_temp))?,
            );
            rec.power = parse_optional(cols.power.map(field))?;
            rec.status = cols
                .status
                .map(field)
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(str::to_string);
            let turbine = cols
                .turbine
                .map(|c| field(c).trim().to_string())
                .unwrap_or_else(|| default_turbine.to_string());
            Ok((turbine, rec))
        })();
        match parsed {
            Ok((turbine, rec)) => {
                *rows_read.entry(turbine.clone()).or_default() += 1;
                grouped.entry(turbine).or_default().push(rec);
            }
            Err(message) => {
                errors.push(RowError { line, message });
                if errors.len() >= MAX_ROW_ERRORS {
                    break;
                }
            }
        }
    }
    if !errors.is_empty() {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            rows: errors,
        });
    }
    if grouped.is_empty() {
        grouped.insert(default_turbine.to_string(), Vec::new());
    }

    Ok(grouped
        .into_iter()
        .map(|(turbine, recs)| {
            let n = rows_read.get(&turbine).copied().unwrap_or(0);
            let (series, dropped) =
                TurbineSeries::from_records(TurbineId::new(farm_id, turbine.clone()), recs);
            if dropped > 0 {
                log::info!(
                    "{}: dropped {dropped} duplicate timestamp row(s) for {farm_id}/{turbine}",
                    path.display()
                );
            }
            (
                series,
                LoadReport {
                    rows_read: n,
                    duplicates_dropped: dropped,
                },
            )
        })
        .collect())
}

/// Loads a single-turbine SCADA CSV. Multi-turbine files must go through
/// [`read_scada_csv`].
pub fn load_scada_csv(
    path: &Path,
    schema: &ColumnSchema,
    id: TurbineId,
) -> Result<(TurbineSeries, LoadReport)> {
    let mut all = read_scada_csv(path, schema, &id.farm_id, &id.turbine_id)?;
    if all.len() != 1 {
        return Err(Error::Schema(format!(
            "{} holds {} turbines; use a per-turbine loader",
            path.display(),
            all.len()
        )));
    }
    Ok(all.remove(0))
}

/// Loads `<dir>/<farm_id>/*.csv`. Without a turbine column each file is one
/// turbine named by its file stem.
pub fn load_fleet_dir(
    dir: &Path,
    schema: &ColumnSchema,
) -> Result<BTreeMap<String, Vec<(TurbineSeries, LoadReport)>>> {
    load_fleet_dir_with(dir, |_| Ok(schema.clone()))
}

/// As [`load_fleet_dir`] with the schema chosen per farm directory.
pub fn load_fleet_dir_with(
    dir: &Path,
    schema_for: impl Fn(&str) -> Result<ColumnSchema>,
) -> Result<BTreeMap<String, Vec<(TurbineSeries, LoadReport)>>> {
    if !dir.is_dir() {
        return Err(Error::io(
            dir,
            std::io::Error::new(std::io::ErrorKind::NotFound, "data directory not found"),
        ));
    }
    let mut farms = BTreeMap::new();
    for farm_dir in sorted_entries(dir)? {
        if !farm_dir.is_dir() {
            continue;
        }
        let farm_id = file_name(&farm_dir);
        let schema = &schema_for(&farm_id)?;
        let mut turbines: BTreeMap<String, (TurbineSeries, LoadReport)> = BTreeMap::new();
        for file in sorted_entries(&farm_dir)? {
            if file.extension().and_then(|e| e.to_str()) != Some("csv") {
                continue;
            }
            let stem = file
                .file_stem()
                .and_then(|s| s.to_str())
                .unwrap_or_default()
                .to_string();
            for (series, report) in read_scada_csv(&file, schema, &farm_id, &stem)? {
                let key = series.id.turbine_id.clone();
                match turbines.remove(&key) {
                    // the same turbine split across files (e.g. one per year)
                    Some((prev, prev_report)) => {
                        let mut recs = prev.records().to_vec();
                        recs.extend_from_slice(series.records());
                        let (merged, dropped) = TurbineSeries::from_records(prev.id, recs);
                        let rep = LoadReport {
                            rows_read: prev_report.rows_read + report.rows_read,
                            duplicates_dropped: prev_report.duplicates_dropped
                                + report.duplicates_dropped
                                + dropped,
                        };
                        turbines.insert(key, (merged, rep));
                    }
                    None => {
                        turbines.insert(key, (series, report));
                    }
                }
            }
        }
        if !turbines.is_empty() {
            farms.insert(farm_id, turbines.into_values().collect());
        }
    }
    Ok(farms)
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut v: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    v.sort();
    Ok(v)
}

fn file_name(p: &Path) -> String {
    p.file_name()
        .and_then(|s| s.to_str())
        .unwrap_or_default()
        .to_string()
}

fn fmt_value(v: f64) -> String {
    if v.is_nan() {
        String::new()
    } else {
        format!("{v}")
    }
}

/// Writes a series in the generic layout.
pub fn write_scada_csv(path: &Path, series: &TurbineSeries) -> Result<()> {
    let io = |e| Error::io(path, e);
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let file = fs::File::create(path).map_err(io)?;
    let mut w = std::io::BufWriter::new(file);
    writeln!(w, "{GENERIC_HEADER}").map_err(io)?;
    for r in series.records() {
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            r.timestamp.format("%Y-%m-%dT%H:%M:%SZ"),
            fmt_value(r.wind_speed),
            fmt_value(r.ambient_temp),
            fmt_value(r.wind_dir),
            fmt_value(r.gear_bearing_temp),
            r.power.map(fmt_value).unwrap_or_default(),
            r.status.as_deref().unwrap_or(""),
        )
        .map_err(io)?;
    }
    w.flush().map_err(io)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_tmp(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::Builder::new().suffix(".csv").tempfile().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    fn id() -> TurbineId {
        TurbineId::new("farm", "wt1")
    }

    #[test]
    fn five_row_generic_file() {
        let f = write_tmp(&format!(
            "{GENERIC_HEADER}\n\
             2017-01-01T00:00:00Z,5.0,3.0,90,40.0,500,ok\n\
             2017-01-01T00:10:00Z,5.5,3.1,95,40.2,550,ok\n\
             2017-01-01T00:20:00Z,6.0,3.2,360,40.4,,\n\
             2017-01-01T00:30:00Z,6.5,3.3,100,40.6,700,ok\n\
             2017-01-01T00:40:00Z,7.0,3.4,105,40.8,800,ok\n"
        ));
        let (s, rep) = load_scada_csv(f.path(), &ColumnSchema::generic(), id()).unwrap();
        assert_eq!(s.len(), 5);
        assert_eq!(rep.rows_read, 5);
        assert_eq!(s.records()[2].wind_dir, 0.0);
        assert_eq!(s.records()[2].power, None);
        assert_eq!(s.records()[0].status.as_deref(), Some("ok"));
    }

    #[test]
    fn duplicate_timestamps_keep_first() {
        let f = write_tmp(&format!(
            "{GENERIC_HEADER}\n\
             2017-01-01T00:00:00Z,5.0,3.0,90,40.0,500,\n\
             2017-01-01T00:10:00Z,5.5,3.1,95,40.2,550,\n\
             2017-01-01T00:10:00Z,9.9,9.9,99,99.9,999,\n\
             2017-01-01T00:20:00Z,6.0,3.2,10,40.4,600,\n"
        ));
        let (s, rep) = load_scada_csv(f.path(), &ColumnSchema::generic(), id()).unwrap();
        assert_eq!(s.len(), 3);
        assert_eq!(rep.duplicates_dropped, 1);
        assert_eq!(s.records()[1].wind_speed, 5.5);
    }

    #[test]
    fn missing_target_column_is_a_schema_error() {
        let f = write_tmp(
            "timestamp,wind_speed_mps,ambient_temp_c,wind_dir_deg,power_kw\n\
             2017-01-01T00:00:00Z,5.0,3.0,90,500\n",
        );
        match load_scada_csv(f.path(), &ColumnSchema::generic(), id()) {
            Err(Error::MissingColumn { column }) => assert_eq!(column, "gear_bearing_temp_c"),
            other => panic!("expected schema error, got {other:?}"),
        }
    }

    #[test]
    fn bad_timestamps_report_line_numbers() {
        let f = write_tmp(&format!(
            "{GENERIC_HEADER}\n\
             2017-01-01T00:00:00Z,5.0,3.0,90,40.0,500,\n\
             yesterday,5.5,3.1,95,40.2,550,\n\
             2017-01-01T00:20:00Z,6.0,3.2,10,40.4,600,\n\
             2017-13-01T00:30:00Z,6.0,3.2,10,40.4,600,\n"
        ));
        match load_scada_csv(f.path(), &ColumnSchema::generic(), id()) {
            Err(Error::Parse { rows, .. }) => {
                let lines: Vec<u64> = rows.iter().map(|r| r.line).collect();
                assert_eq!(lines, vec![3, 5]);
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn row_errors_stop_at_one_hundred() {
        let mut s = format!("{GENERIC_HEADER}\n");
        for _ in 0..250 {
            s.push_str("bad,1,1,1,1,1,\n");
        }
        let f = write_tmp(&s);
        match load_scada_csv(f.path(), &ColumnSchema::generic(), id()) {
            Err(Error::Parse { rows, .. }) => assert_eq!(rows.len(), 100),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn empty_cells_become_nan() {
        let f = write_tmp(&format!(
            "{GENERIC_HEADER}\n2017-01-01T00:00:00Z,,3.0,90,40.0,,\n"
        ));
        let (s, _) = load_scada_csv(f.path(), &ColumnSchema::generic(), id()).unwrap();
        assert!(s.records()[0].wind_speed.is_nan());
    }

    #[test]
    fn greenbyte_preamble_and_naive_timestamps() {
        // the target column name contains a comma, so the export quotes it
        let f = write_tmp(
            "# exported\n\
             # Date and time,Wind speed (m/s),Wind direction (°),Nacelle ambient temperature (°C),\"Gear bearing temperature, high speed side (°C)\",Power (kW)\n\
             2017-01-01 00:00:00,5.0,90,3.0,40.0,500\n\
             2017-01-01 00:10:00,5.1,91,3.0,40.1,510\n",
        );
        let (s, _) = load_scada_csv(f.path(), &ColumnSchema::kelmarsh(), id()).unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s.records()[1].gear_bearing_temp, 40.1);
    }

    #[test]
    fn turbine_column_splits_file() {
        let f = write_tmp(
            "Timestamp,Turbine_ID,Amb_WindSpeed_Avg,Amb_Temp_Avg,Amb_WindDir_Abs_Avg,Gear_Bear_Temp_Avg,Grd_Prod_Pwr_Avg\n\
             2017-01-01T00:00:00+00:00,T01,5,3,90,40,500\n\
             2017-01-01T00:00:00+00:00,T06,6,3,90,41,600\n\
             2017-01-01T00:10:00+00:00,T01,5,3,90,40,500\n",
        );
        let all = read_scada_csv(f.path(), &ColumnSchema::edp(), "edp", "x").unwrap();
        assert_eq!(all.len(), 2);
        assert_eq!(all[0].0.id.turbine_id, "T01");
        assert_eq!(all[0].0.len(), 2);
        assert_eq!(all[1].0.len(), 1);
    }

    #[test]
    fn round_trip_through_generic_writer() {
        let dir = tempfile::tempdir().unwrap();
        let f = write_tmp(&format!(
            "{GENERIC_HEADER}\n\
             2017-01-01T00:00:00Z,5.25,3.0,90,40.0,500,ok\n\
             2017-01-01T00:10:00Z,5.5,-3.1,95.5,40.2,,\n"
        ));
        let (s, _) = load_scada_csv(f.path(), &ColumnSchema::generic(), id()).unwrap();
        let out = dir.path().join("wt1.csv");
        write_scada_csv(&out, &s).unwrap();
        let (back, _) = load_scada_csv(&out, &ColumnSchema::generic(), id()).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn schema_resolution() {
        assert_eq!(ColumnSchema::resolve("EDP").unwrap().name, "edp");
        assert!(matches!(
            ColumnSchema::resolve("nonexistent-adapter"),
            Err(Error::Config(_))
        ));
        let mut f = tempfile::Builder::new().suffix(".toml").tempfile().unwrap();
        write!(
            f,
            "name = \"custom\"\ntimestamp = \"ts\"\nwind_speed = \"ws\"\nambient_temp = \"at\"\nwind_dir = \"wd\"\ngear_bearing_temp = \"gb\"\n"
        )
        .unwrap();
        let s = ColumnSchema::resolve(f.path().to_str().unwrap()).unwrap();
        assert_eq!(s.gear_bearing_temp, "gb");
        assert_eq!(s.power, None);
    }
}
