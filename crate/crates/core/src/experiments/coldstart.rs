use std::collections::BTreeMap;

use super::ResultsTable;
use crate::error::{Error, Result};
use crate::fl_core::StrategyKind;

/// Label used for curves averaged over every farm.
pub const ALL_FARMS: &str = "all";

/// Mean test MAE against days of training data, one knot per week range.
#[derive(Debug, Clone, PartialEq)]
pub struct ColdStartCurve {
    pub strategy: StrategyKind,
    pub fine_tuned: bool,
    pub farm_id: String,
    /// (days, MAE °C), days strictly increasing.
    pub knots: Vec<(f64, f64)>,
}

impl ColdStartCurve {
    /// Linear interpolation between knots; `None` outside them.
    pub fn value_at(&self, days: f64) -> Option<f64> {
        let first = self.knots.first()?;
        if days < first.0 {
            return None;
        }
        for w in self.knots.windows(2) {
            let ((d0, m0), (d1, m1)) = (w[0], w[1]);
            if days <= d1 {
                return Some(m0 + (m1 - m0) * (days - d0) / (d1 - d0));
            }
        }
        let last = self.knots.last()?;
        (days == last.0).then_some(last.1)
    }
}

/// Curves per (strategy, fine-tuned, farm) plus one per strategy over all
/// farms, from valid cells only.
pub fn cold_start_curves(table: &ResultsTable) -> Vec<ColdStartCurve> {
    type Key = (StrategyKind, bool, String);
    let mut sums: BTreeMap<Key, BTreeMap<u32, (f64, usize)>> = BTreeMap::new();
    for c in table.valid_cells() {
        let mae = c.test_mae_c.expect("valid cells carry an MAE");
        for farm in [c.farm_id.as_str(), ALL_FARMS] {
            let e = sums
                .entry((c.strategy, c.fine_tuned, farm.to_string()))
                .or_default()
                .entry(c.weeks)
                .or_insert((0.0, 0));
            e.0 += mae;
            e.1 += 1;
        }
    }
    sums.into_iter()
        .map(
            |((strategy, fine_tuned, farm_id), by_week)| ColdStartCurve {
                strategy,
                fine_tuned,
                farm_id,
                knots: by_week
                    .into_iter()
                    .map(|(w, (s, n))| (7.0 * w as f64, s / n as f64))
                    .collect(),
            },
        )
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpeedUp {
    /// Best Local MAE over all knots.
    pub reference_mae_c: f64,
    /// First day the curve reaches the reference.
    pub t_star_days: Option<f64>,
    /// `horizon - t*`, 0 when the reference is never reached.
    pub speedup_days: f64,
    pub reached: bool,
}

/// Days of training data saved by `fl` relative to the best `local` result.
///
/// The horizon is the last knot of `local` (84 days for the full grid).
pub fn cold_start_speedup(fl: &ColdStartCurve, local: &ColdStartCurve) -> Result<SpeedUp> {
    let (Some(first), Some(last)) = (fl.knots.first(), local.knots.last()) else {
        return Err(Error::contract("cold-start curves need at least one knot"));
    };
    let horizon = last.0;
    let reference = local
        .knots
        .iter()
        .map(|k| k.1)
        .fold(f64::INFINITY, f64::min);
    let mut t_star = None;
    if first.1 <= reference {
        t_star = Some(first.0);
    } else {
        for w in fl.knots.windows(2) {
            let ((d0, m0), (d1, m1)) = (w[0], w[1]);
            if m1 <= reference {
                // m0 > reference >= m1
                t_star = Some(d0 + (d1 - d0) * (m0 - reference) / (m0 - m1));
                break;
            }
        }
    }
    Ok(match t_star {
        Some(t) => SpeedUp {
            reference_mae_c: reference,
            t_star_days: Some(t),
            speedup_days: (horizon - t).max(0.0),
            reached: true,
        },
        None => SpeedUp {
            reference_mae_c: reference,
            t_star_days: None,
            speedup_days: 0.0,
            reached: false,
        },
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpeedUpRow {
    pub strategy: StrategyKind,
    pub fine_tuned: bool,
    pub farm_id: String,
    pub speedup: SpeedUp,
}

/// One row per curve and farm against that farm's non-fine-tuned Local
/// curve. Local itself is listed as the zero baseline.
pub fn speedup_table(curves: &[ColdStartCurve]) -> Result<Vec<SpeedUpRow>> {
    let mut rows = Vec::new();
    for local in curves
        .iter()
        .filter(|c| c.strategy == StrategyKind::Local && !c.fine_tuned)
    {
        let reference = local
            .knots
            .iter()
            .map(|k| k.1)
            .fold(f64::INFINITY, f64::min);
        let horizon = local.knots.last().map_or(0.0, |k| k.0);
        rows.push(SpeedUpRow {
            strategy: StrategyKind::Local,
            fine_tuned: false,
            farm_id: local.farm_id.clone(),
            speedup: SpeedUp {
                reference_mae_c: reference,
                t_star_days: Some(horizon),
                speedup_days: 0.0,
                reached: true,
            },
        });
        for fl in curves
            .iter()
            .filter(|c| c.farm_id == local.farm_id && !std::ptr::eq(*c, local))
        {
            rows.push(SpeedUpRow {
                strategy: fl.strategy,
                fine_tuned: fl.fine_tuned,
                farm_id: fl.farm_id.clone(),
                speedup: cold_start_speedup(fl, local)?,
            });
        }
    }
    Ok(rows)
}
