//! Seeded synthetic SCADA fleets with per-farm heterogeneity and data gaps.
//!
//! Per 10-minute slot:
//!
//! - wind speed: an AR(1) Gaussian process mapped onto a Weibull marginal;
//! - ambient: mean + seasonal and diurnal sinusoids + noise;
//! - gear bearing: `offset + gain * lagged_ws + 0.5 * ambient
//!   + nonlinearity * (lagged_ws / scale)^2 + noise`, where `lagged_ws` is a
//!   first-order lag of wind speed with time constant `lag_steps`;
//! - direction uniform, power from a simple cubic curve.
//!
//! Missing slots are drawn as a Binomial(N, 1 - availability) count and laid
//! out as contiguous outages.

use std::collections::BTreeMap;
use std::f64::consts::{PI, SQRT_2};

use chrono::{DateTime, Duration, Utc};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution, Geometric, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};
use crate::scada_data::{
    grid_index, snap_to_grid, ScadaRecord, TurbineId, TurbineSeries, STEP_SECONDS,
};
use crate::seed::derive_seed;

pub const SLOTS_PER_DAY: usize = 144;
pub const RATED_POWER_KW: f64 = 2050.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthFarmSpec {
    pub farm_id: String,
    pub n_turbines: usize,
    /// Gear-temperature baseline, °C.
    pub target_offset: f64,
    pub ambient_mean: f64,
    pub seasonal_amplitude: f64,
    /// Day of year at which the seasonal ambient peaks.
    pub seasonal_peak_day: f64,
    pub diurnal_amplitude: f64,
    pub ambient_noise_std: f64,
    pub weibull_shape: f64,
    /// m/s
    pub weibull_scale: f64,
    /// Lag-1 autocorrelation of the latent wind process.
    pub wind_autocorrelation: f64,
    /// °C per m/s
    pub coupling_gain: f64,
    /// Time constant of the thermal lag in 10-minute steps.
    pub lag_steps: f64,
    pub nonlinearity_gain: f64,
    /// Gear-temperature noise, °C.
    pub noise_std: f64,
    /// Expected fraction of slots present, in (0, 1].
    pub availability: f64,
    /// Mean outage length in slots.
    pub outage_mean_len: f64,
    pub seed: u64,
}

impl Default for SynthFarmSpec {
    fn default() -> Self {
        Self {
            farm_id: "synth".into(),
            n_turbines: 4,
            target_offset: 40.0,
            ambient_mean: 10.0,
            seasonal_amplitude: 8.0,
            seasonal_peak_day: 200.0,
            diurnal_amplitude: 3.0,
            ambient_noise_std: 0.5,
            weibull_shape: 2.0,
            weibull_scale: 8.0,
            wind_autocorrelation: 0.98,
            coupling_gain: 1.5,
            lag_steps: 12.0,
            nonlinearity_gain: 0.0,
            noise_std: 0.3,
            availability: 1.0,
            outage_mean_len: 144.0,
            seed: 0,
        }
    }
}

impl SynthFarmSpec {
    pub fn new(farm_id: impl Into<String>) -> Self {
        Self {
            farm_id: farm_id.into(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| {
            Err(Error::contract(format!(
                "synthetic farm {}: {what}",
                self.farm_id
            )))
        };
        if self.farm_id.is_empty() {
            return bad("empty farm_id");
        }
        if self.n_turbines == 0 {
            return bad("n_turbines must be >= 1");
        }
        if !(self.availability > 0.0 && self.availability <= 1.0) {
            return bad("availability must lie in (0, 1]");
        }
        let amplitudes = [
            self.seasonal_amplitude,
            self.diurnal_amplitude,
            self.ambient_noise_std,
            self.noise_std,
            self.lag_steps,
        ];
        if amplitudes.iter().any(|a| !(*a >= 0.0 && a.is_finite())) {
            return bad("amplitudes, noise levels and lag must be finite and >= 0");
        }
        if !(self.weibull_shape > 0.0 && self.weibull_scale > 0.0) {
            return bad("Weibull shape and scale must be > 0");
        }
        if !(self.wind_autocorrelation >= 0.0 && self.wind_autocorrelation < 1.0) {
            return bad("wind_autocorrelation must lie in [0, 1)");
        }
        if self.outage_mean_len.is_nan() || self.outage_mean_len < 1.0 {
            return bad("outage_mean_len must be >= 1");
        }
        let finite = [
            self.target_offset,
            self.ambient_mean,
            self.seasonal_peak_day,
            self.coupling_gain,
            self.nonlinearity_gain,
        ];
        if finite.iter().any(|v| !v.is_finite()) {
            return bad("non-finite parameter");
        }
        Ok(())
    }

    pub fn turbine_id(&self, index: usize) -> TurbineId {
        TurbineId::new(self.farm_id.clone(), format!("T{:02}", index + 1))
    }
}

/// Three farms of four turbines with baselines 30/45/60 °C and
/// availabilities 0.99/0.95/0.70. Farms also differ in wind climate, thermal
/// coupling and lag.
pub fn reference_fleet(seed: u64) -> Vec<SynthFarmSpec> {
    let farm = |id: &str, offset, availability, gain, lag, shape, scale, nonlin| SynthFarmSpec {
        target_offset: offset,
        availability,
        coupling_gain: gain,
        lag_steps: lag,
        weibull_shape: shape,
        weibull_scale: scale,
        nonlinearity_gain: nonlin,
        seed,
        ..SynthFarmSpec::new(id)
    };
    vec![
        farm("farm_a", 30.0, 0.99, 1.0, 6.0, 2.2, 7.0, 0.0),
        farm("farm_b", 45.0, 0.95, 2.0, 12.0, 1.8, 9.0, 3.0),
        farm("farm_c", 60.0, 0.70, 3.0, 24.0, 2.0, 8.0, -4.0),
    ]
}

fn power_curve(ws: f64) -> f64 {
    const CUT_IN: f64 = 3.0;
    const RATED_WS: f64 = 12.0;
    if ws < CUT_IN {
        0.0
    } else if ws >= RATED_WS {
        RATED_POWER_KW
    } else {
        RATED_POWER_KW * (ws.powi(3) - CUT_IN.powi(3)) / (RATED_WS.powi(3) - CUT_IN.powi(3))
    }
}

/// Presence mask with exactly `n - K` present slots, `K ~ Binomial(n, 1 - availability)`,
/// the missing ones grouped into outages of geometric length.
fn presence_mask(n: usize, availability: f64, mean_len: f64, rng: &mut ChaCha8Rng) -> Vec<bool> {
    let missing = if availability >= 1.0 {
        0
    } else {
        Binomial::new(n as u64, 1.0 - availability)
            .expect("probability in [0, 1)")
            .sample(rng) as usize
    };
    let mut mask = vec![true; n];
    if missing == 0 {
        return mask;
    }
    let geo = Geometric::new(1.0 / mean_len).expect("mean length >= 1");
    let mut lengths = Vec::new();
    let mut left = missing;
    while left > 0 {
        let len = ((geo.sample(rng) + 1) as usize).min(left);
        lengths.push(len);
        left -= len;
    }
    // split the present slots into len + 1 runs by uniform cut points
    let present = n - missing;
    let mut cuts: Vec<usize> = (0..lengths.len())
        .map(|_| rng.gen_range(0..=present))
        .collect();
    cuts.sort_unstable();
    let mut pos = 0;
    let mut prev_cut = 0;
    for (len, cut) in lengths.into_iter().zip(cuts) {
        pos += cut - prev_cut;
        prev_cut = cut;
        mask[pos..pos + len].fill(false);
        pos += len;
    }
    mask
}

/// Generates `n_slots` consecutive 10-minute slots from `start` (snapped to
/// the grid) and drops the unavailable ones.
pub fn generate_turbine_slots(
    spec: &SynthFarmSpec,
    turbine_index: usize,
    start: DateTime<Utc>,
    n_slots: usize,
) -> Result<TurbineSeries> {
    spec.validate()?;
    let id = spec.turbine_id(turbine_index);
    let index = turbine_index.to_string();
    let stream =
        |name: &str| ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, &["turbine", &index, name]));
    let mut wind_rng = stream("wind");
    let mut ambient_rng = stream("ambient");
    let mut gear_rng = stream("gear");
    let mut dir_rng = stream("direction");
    let mut outage_rng = stream("outages");

    let start = snap_to_grid(start);
    let g0 = grid_index(start);
    let rho = spec.wind_autocorrelation;
    let innovation = (1.0 - rho * rho).sqrt();
    let alpha = 1.0 / (1.0 + spec.lag_steps);
    let mut z: f64 = wind_rng.sample(StandardNormal);
    let mut lagged: Option<f64> = None;
    let mask = presence_mask(
        n_slots,
        spec.availability,
        spec.outage_mean_len,
        &mut outage_rng,
    );

    let mut records = Vec::with_capacity(n_slots);
    for (i, present) in mask.into_iter().enumerate() {
        if i > 0 {
            let e: f64 = wind_rng.sample(StandardNormal);
            z = rho * z + innovation * e;
        }
        // Weibull quantile of Phi(z), using 1 - Phi(z) = erfc(z / sqrt 2) / 2
        let tail = (0.5 * erfc(z / SQRT_2)).max(f64::MIN_POSITIVE);
        let ws = (spec.weibull_scale * (-tail.ln()).powf(1.0 / spec.weibull_shape)).min(39.0);
        let lw = match lagged {
            Some(prev) => prev + alpha * (ws - prev),
            None => ws,
        };
        lagged = Some(lw);

        let ts = start + Duration::seconds(STEP_SECONDS * i as i64);
        let days = (g0 + i as i64) as f64 / SLOTS_PER_DAY as f64;
        let day_of_year = days.rem_euclid(365.25);
        let hour = days.fract() * 24.0;
        let noise_a: f64 = ambient_rng.sample(StandardNormal);
        let ambient = (spec.ambient_mean
            + spec.seasonal_amplitude
                * (2.0 * PI * (day_of_year - spec.seasonal_peak_day) / 365.25).cos()
            + spec.diurnal_amplitude * (2.0 * PI * (hour - 15.0) / 24.0).cos()
            + spec.ambient_noise_std * noise_a)
            .clamp(-39.0, 59.0);
        let noise_g: f64 = gear_rng.sample(StandardNormal);
        let scaled = lw / spec.weibull_scale;
        let gear = (spec.target_offset
            + spec.coupling_gain * lw
            + 0.5 * ambient
            + spec.nonlinearity_gain * scaled * scaled
            + spec.noise_std * noise_g)
            .clamp(-19.0, 119.0);
        let dir = dir_rng.gen_range(0.0..360.0);
        if present {
            let mut r = ScadaRecord::new(ts, ws, ambient, dir, gear);
            r.power = Some(power_curve(ws));
            records.push(r);
        }
    }
    Ok(TurbineSeries::from_records(id, records).0)
}

/// `duration_days` days of data for turbine `turbine_index` of `spec`.
pub fn generate_turbine(
    spec: &SynthFarmSpec,
    turbine_index: usize,
    start: DateTime<Utc>,
    duration_days: u32,
) -> Result<TurbineSeries> {
    if duration_days == 0 {
        return Err(Error::contract(
            "synthetic duration must be at least one day",
        ));
    }
    generate_turbine_slots(
        spec,
        turbine_index,
        start,
        duration_days as usize * SLOTS_PER_DAY,
    )
}

/// All turbines of all farms. Each farm's seed is re-derived from its id, so
/// the output of a farm does not depend on its position in `specs`.
pub fn generate_fleet(
    specs: &[SynthFarmSpec],
    start: DateTime<Utc>,
    duration_days: u32,
) -> Result<BTreeMap<String, Vec<TurbineSeries>>> {
    let mut fleet = BTreeMap::new();
    for spec in specs {
        if fleet.contains_key(&spec.farm_id) {
            return Err(Error::contract(format!(
                "duplicate synthetic farm_id {}",
                spec.farm_id
            )));
        }
        let farm = SynthFarmSpec {
            seed: derive_seed(spec.seed, &["farm", &spec.farm_id]),
            ..spec.clone()
        };
        let series = (0..spec.n_turbines)
            .map(|t| generate_turbine(&farm, t, start, duration_days))
            .collect::<Result<Vec<_>>>()?;
        fleet.insert(spec.farm_id.clone(), series);
    }
    Ok(fleet)
}
