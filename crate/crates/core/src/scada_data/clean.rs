use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{ScadaRecord, TurbineSeries};

/// Rule names in evaluation order. A row is attributed to the first rule it
/// violates, so the per-rule counts partition the removed rows.
pub const RULE_NAMES: [&str; 6] = [
    "missing_channel",
    "non_finite",
    "wind_speed_bounds",
    "ambient_temp_bounds",
    "gear_bearing_temp_bounds",
    "curtailment",
];

/// Low-output rows at productive wind speeds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CurtailmentRule {
    pub min_wind_speed: f64,
    /// Fraction of rated power below which a row counts as curtailed.
    pub min_power_fraction: f64,
    pub rated_power_kw: f64,
}

impl Default for CurtailmentRule {
    fn default() -> Self {
        Self {
            min_wind_speed: 4.0,
            min_power_fraction: 0.01,
            rated_power_kw: 2050.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CleaningRules {
    pub wind_speed: (f64, f64),
    pub ambient_temp: (f64, f64),
    pub gear_bearing_temp: (f64, f64),
    /// Only applied to rows that carry a power reading.
    pub curtailment: Option<CurtailmentRule>,
}

impl Default for CleaningRules {
    fn default() -> Self {
        Self {
            wind_speed: (0.0, 40.0),
            ambient_temp: (-40.0, 60.0),
            gear_bearing_temp: (-20.0, 120.0),
            curtailment: Some(CurtailmentRule::default()),
        }
    }
}

impl CleaningRules {
    /// Name of the first rule `r` violates, if any.
    pub fn violation(&self, r: &ScadaRecord) -> Option<&'static str> {
        let required = [
            r.wind_speed,
            r.ambient_temp,
            r.wind_dir,
            r.gear_bearing_temp,
        ];
        if required.iter().any(|v| v.is_nan()) {
            return Some(RULE_NAMES[0]);
        }
        if required.iter().any(|v| !v.is_finite()) {
            return Some(RULE_NAMES[1]);
        }
        let outside = |v: f64, (lo, hi): (f64, f64)| v < lo || v > hi;
        if outside(r.wind_speed, self.wind_speed) {
            return Some(RULE_NAMES[2]);
        }
        if outside(r.ambient_temp, self.ambient_temp) {
            return Some(RULE_NAMES[3]);
        }
        if outside(r.gear_bearing_temp, self.gear_bearing_temp) {
            return Some(RULE_NAMES[4]);
        }
        if let (Some(rule), Some(power)) = (self.curtailment, r.power) {
            if r.wind_speed >= rule.min_wind_speed
                && power < rule.min_power_fraction * rule.rated_power_kw
            {
                return Some(RULE_NAMES[5]);
            }
        }
        None
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CleaningReport {
    pub rows_in: usize,
    pub rows_out: usize,
    pub removed_by_rule: BTreeMap<String, usize>,
}

impl CleaningReport {
    pub fn removed(&self) -> usize {
        self.removed_by_rule.values().sum()
    }
}

/// Removes every row violating `rules`. Idempotent.
pub fn clean_series(
    series: &TurbineSeries,
    rules: &CleaningRules,
) -> (TurbineSeries, CleaningReport) {
    let mut removed_by_rule: BTreeMap<String, usize> =
        RULE_NAMES.iter().map(|n| (n.to_string(), 0)).collect();
    let kept: Vec<ScadaRecord> = series
        .records()
        .iter()
        .filter(|r| match rules.violation(r) {
            Some(rule) => {
                *removed_by_rule.get_mut(rule).expect("known rule") += 1;
                false
            }
            None => true,
        })
        .cloned()
        .collect();
    let report = CleaningReport {
        rows_in: series.len(),
        rows_out: kept.len(),
        removed_by_rule,
    };
    (
        TurbineSeries::from_sorted_unchecked(series.id.clone(), kept),
        report,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scada_data::{TurbineId, TurbineSeries};
    use chrono::{Duration, TimeZone, Utc};
    use proptest::prelude::*;

    fn series(rows: &[(f64, f64, f64, f64, Option<f64>)]) -> TurbineSeries {
        let t0 = Utc.with_ymd_and_hms(2017, 3, 1, 0, 0, 0).unwrap();
        let recs = rows
            .iter()
            .enumerate()
            .map(|(i, &(ws, at, wd, gb, p))| {
                let mut r = ScadaRecord::new(t0 + Duration::minutes(10 * i as i64), ws, at, wd, gb);
                r.power = p;
                r
            })
            .collect();
        TurbineSeries::from_records(TurbineId::new("f", "t"), recs).0
    }

    #[test]
    fn hot_gear_bearing_is_removed() {
        let s = series(&[(5.0, 10.0, 0.0, 50.0, None), (5.0, 10.0, 0.0, 150.0, None)]);
        let (out, rep) = clean_series(&s, &CleaningRules::default());
        assert_eq!(out.len(), 1);
        assert_eq!(rep.removed_by_rule["gear_bearing_temp_bounds"], 1);
        assert_eq!(rep.rows_out + rep.removed(), rep.rows_in);
    }

    #[test]
    fn in_bounds_without_power_is_a_no_op() {
        let s = series(&[
            (5.0, 10.0, 0.0, 50.0, None),
            (12.0, -5.0, 359.0, 60.0, None),
        ]);
        let (out, rep) = clean_series(&s, &CleaningRules::default());
        assert_eq!(out, s);
        assert!(rep.removed_by_rule.values().all(|&c| c == 0));
    }

    #[test]
    fn zero_power_at_ten_mps_is_curtailment() {
        // threshold: 1% of 2050 kW = 20.5 kW
        let s = series(&[
            (10.0, 10.0, 0.0, 50.0, Some(0.0)),
            (10.0, 10.0, 0.0, 50.0, Some(20.5)),
            (3.0, 10.0, 0.0, 50.0, Some(0.0)),
        ]);
        let (out, rep) = clean_series(&s, &CleaningRules::default());
        assert_eq!(out.len(), 2);
        assert_eq!(rep.removed_by_rule["curtailment"], 1);
    }

    #[test]
    fn missing_channels_are_removed() {
        let s = series(&[
            (f64::NAN, 10.0, 0.0, 50.0, None),
            (5.0, 10.0, 0.0, f64::INFINITY, None),
        ]);
        let (out, rep) = clean_series(&s, &CleaningRules::default());
        assert!(out.is_empty());
        assert_eq!(rep.removed_by_rule["missing_channel"], 1);
        assert_eq!(rep.removed_by_rule["non_finite"], 1);
    }

    proptest! {
        #[test]
        fn cleaning_is_idempotent_and_accounts_for_every_row(
            rows in prop::collection::vec(
                (-5.0f64..50.0, -50.0f64..70.0, 0.0f64..360.0, -30.0f64..130.0,
                 prop::option::of(-10.0f64..2100.0)),
                0..60)
        ) {
            let s = series(&rows);
            let rules = CleaningRules::default();
            let (once, rep) = clean_series(&s, &rules);
            let (twice, rep2) = clean_series(&once, &rules);
            prop_assert_eq!(&once, &twice);
            prop_assert_eq!(rep.rows_out + rep.removed(), rep.rows_in);
            prop_assert_eq!(rep2.removed(), 0);
        }
    }
}
