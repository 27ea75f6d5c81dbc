//! TOML run configuration.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use fednbm::experiments::{start_instant, ExperimentPlan};
use fednbm::scada_data::{load_fleet_dir_with, ColumnSchema, LoadReport, TurbineSeries};
use fednbm::synthdata::{generate_fleet, reference_fleet, SynthFarmSpec};
use fednbm::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Output directory; `--out` takes precedence.
    pub out: Option<PathBuf>,
    /// Master seed; `--seed` takes precedence, then `plan.master_seed`.
    pub seed: Option<u64>,
    pub data: DataSource,
    pub plan: ExperimentPlan,
}

/// Exactly one of `csv` and `synthetic` must be set.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSource {
    pub csv: Option<CsvSource>,
    pub synthetic: Option<SyntheticSource>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvSource {
    /// Directory laid out as `<dir>/<farm_id>/*.csv`.
    pub dir: PathBuf,
    /// Built-in adapter name or path to a column-mapping file.
    #[serde(default = "default_schema")]
    pub schema: String,
    /// Per-farm overrides of `schema`, keyed by farm directory name.
    #[serde(default)]
    pub farm_schemas: BTreeMap<String, String>,
}

fn default_schema() -> String {
    "generic".into()
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSource {
    /// TOML file with a `[[farms]]` array of farm specs.
    pub spec_file: Option<PathBuf>,
    /// Inline farm specs. With neither this nor `spec_file` the reference
    /// three-farm fleet is generated from the master seed.
    pub farms: Vec<SynthFarmSpec>,
    /// First generated day; defaults to the earliest plan start date.
    pub start: Option<NaiveDate>,
    /// Days generated; defaults to covering every start date plus its test window.
    pub days: Option<u32>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct FarmFile {
    farms: Vec<SynthFarmSpec>,
}

/// Raw series per farm plus load bookkeeping (empty for synthetic data).
pub type LoadedFleet = BTreeMap<String, Vec<(TurbineSeries, LoadReport)>>;

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg: RunConfig =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.resolve_paths(path.parent().unwrap_or(Path::new(".")));
        Ok(cfg)
    }

    /// Makes relative data paths relative to the config file's directory.
    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(csv) = &mut self.data.csv {
            fix(&mut csv.dir);
            for schema in std::iter::once(&mut csv.schema).chain(csv.farm_schemas.values_mut()) {
                let path = base.join(&*schema);
                if ColumnSchema::named(schema).is_none() && path.exists() {
                    *schema = path.to_string_lossy().into_owned();
                }
            }
        }
        if let Some(syn) = &mut self.data.synthetic {
            if let Some(p) = &mut syn.spec_file {
                fix(p);
            }
        }
        if let Some(out) = &mut self.out {
            fix(out);
        }
    }

    /// Applies command-line overrides and checks the result.
    pub fn finalize(&mut self, seed: Option<u64>) -> Result<()> {
        if let Some(s) = seed.or(self.seed) {
            self.plan.master_seed = s;
        }
        self.seed = Some(self.plan.master_seed);
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        match (&self.data.csv, &self.data.synthetic) {
            (Some(_), Some(_)) => {
                return Err(Error::Config(
                    "data: set exactly one of data.csv and data.synthetic, not both".into(),
                ))
            }
            (None, None) => {
                return Err(Error::Config(
                    "data: one of data.csv or data.synthetic is required".into(),
                ))
            }
            (Some(csv), None) => {
                ColumnSchema::resolve(&csv.schema)?;
                for schema in csv.farm_schemas.values() {
                    ColumnSchema::resolve(schema)?;
                }
            }
            (None, Some(syn)) => {
                if syn.spec_file.is_some() && !syn.farms.is_empty() {
                    return Err(Error::Config(
                        "data.synthetic: set spec_file or farms, not both".into(),
                    ));
                }
                if let Some(p) = &syn.spec_file {
                    if !p.is_file() {
                        return Err(Error::Config(format!(
                            "data.synthetic.spec_file {} not found",
                            p.display()
                        )));
                    }
                }
                let mut ids = std::collections::BTreeSet::new();
                for f in &syn.farms {
                    f.validate().map_err(as_config)?;
                    if !ids.insert(&f.farm_id) {
                        return Err(Error::Config(format!(
                            "data.synthetic.farms: farm `{}` listed twice",
                            f.farm_id
                        )));
                    }
                }
                if syn.days == Some(0) {
                    return Err(Error::Config("data.synthetic.days must be >= 1".into()));
                }
            }
        }
        self.plan.validate()
    }

    /// Farm specs for a synthetic source.
    pub fn synth_specs(&self) -> Result<Vec<SynthFarmSpec>> {
        let syn = self
            .data
            .synthetic
            .as_ref()
            .ok_or_else(|| Error::Config("data.synthetic is not set".into()))?;
        let specs = match &syn.spec_file {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                let file: FarmFile = toml::from_str(&text)
                    .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
                file.farms
            }
            None if syn.farms.is_empty() => reference_fleet(self.plan.master_seed),
            None => syn.farms.clone(),
        };
        for s in &specs {
            s.validate().map_err(as_config)?;
        }
        Ok(specs)
    }

    /// Generation window for a synthetic source.
    pub fn synth_window(&self) -> (NaiveDate, u32) {
        let syn = self.data.synthetic.clone().unwrap_or_default();
        let first = *self
            .plan
            .start_dates
            .iter()
            .min()
            .expect("validated plan has start dates");
        let last = *self
            .plan
            .start_dates
            .iter()
            .max()
            .expect("validated plan has start dates");
        let start = syn.start.unwrap_or(first);
        let needed = (last - start).num_days() + self.plan.horizon_days();
        (start, syn.days.unwrap_or(needed.max(1) as u32))
    }

    pub fn load_fleet(&self) -> Result<LoadedFleet> {
        if let Some(csv) = &self.data.csv {
            let fleet = load_fleet_dir_with(&csv.dir, |farm| {
                ColumnSchema::resolve(csv.farm_schemas.get(farm).unwrap_or(&csv.schema))
            })?;
            if fleet.is_empty() {
                return Err(Error::InsufficientData(format!(
                    "no farm sub-directories with CSV files under {}",
                    csv.dir.display()
                )));
            }
            return Ok(fleet);
        }
        let (start, days) = self.synth_window();
        let fleet = generate_fleet(&self.synth_specs()?, start_instant(start), days)?;
        Ok(fleet
            .into_iter()
            .map(|(farm, series)| {
                (
                    farm,
                    series
                        .into_iter()
                        .map(|s| (s, LoadReport::default()))
                        .collect(),
                )
            })
            .collect())
    }
}

/// Invalid farm specs in a config file are configuration mistakes.
fn as_config(e: Error) -> Error {
    match e {
        Error::Contract(m) => Error::Config(m),
        other => other,
    }
}

/// Every default spelled out, with a synthetic data source so the file runs as is.
pub fn defaults_toml() -> String {
    let cfg = RunConfig {
        out: Some(PathBuf::from("results")),
        seed: Some(0),
        data: DataSource {
            csv: None,
            synthetic: Some(SyntheticSource {
                farms: vec![SynthFarmSpec::default()],
                ..Default::default()
            }),
        },
        plan: ExperimentPlan::default(),
    };
    let body = toml::to_string(&cfg).expect("run config serializes to TOML");
    let mut text = String::from(
        "# Generated by `fednbm defaults`. Every value below is the built-in default.\n\
         # Replace [data.synthetic] with [data.csv] (dir, schema) to use real SCADA exports.\n\n",
    );
    text.push_str(&body);
    text
}
