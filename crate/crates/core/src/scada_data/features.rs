use std::sync::Arc;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use super::{grid_index, ScadaRecord, TimeRange, TurbineId, TurbineSeries};
use crate::error::{Error, Result};

/// Normalized wind speed, normalized ambient temperature, sin(dir), cos(dir).
pub const FEATURE_CHANNELS: usize = 4;

const MIN_STD: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: f64,
    /// Population standard deviation, replaced by 1.0 when degenerate.
    pub std: f64,
    pub degenerate: bool,
}

impl ChannelStats {
    fn from_values(values: impl Iterator<Item = f64> + Clone) -> Self {
        let n = values.clone().count() as f64;
        let mean = values.clone().sum::<f64>() / n;
        let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let std = var.sqrt();
        if std < MIN_STD || !std.is_finite() {
            Self {
                mean,
                std: 1.0,
                degenerate: true,
            }
        } else {
            Self {
                mean,
                std,
                degenerate: false,
            }
        }
    }

    pub fn normalize(&self, v: f64) -> f64 {
        (v - self.mean) / self.std
    }

    pub fn denormalize(&self, v: f64) -> f64 {
        v * self.std + self.mean
    }
}

/// Z-score statistics fitted on a training slice.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub wind_speed: ChannelStats,
    pub ambient_temp: ChannelStats,
    pub gear_bearing_temp: ChannelStats,
}

impl NormalizationStats {
    fn fit(records: &[&ScadaRecord]) -> Self {
        Self {
            wind_speed: ChannelStats::from_values(records.iter().map(|r| r.wind_speed)),
            ambient_temp: ChannelStats::from_values(records.iter().map(|r| r.ambient_temp)),
            gear_bearing_temp: ChannelStats::from_values(
                records.iter().map(|r| r.gear_bearing_temp),
            ),
        }
    }

    /// Identity transform; handy for fixtures that are already normalized.
    pub fn identity() -> Self {
        let unit = ChannelStats {
            mean: 0.0,
            std: 1.0,
            degenerate: false,
        };
        Self {
            wind_speed: unit,
            ambient_temp: unit,
            gear_bearing_temp: unit,
        }
    }
}

/// Fits per-channel mean and standard deviation over the records in `range`.
pub fn fit_normalization(series: &TurbineSeries, range: TimeRange) -> Result<NormalizationStats> {
    fit_normalization_pooled(std::slice::from_ref(series), range)
}

/// Fits statistics over the in-range records of several turbines at once.
pub fn fit_normalization_pooled(
    series: &[TurbineSeries],
    range: TimeRange,
) -> Result<NormalizationStats> {
    if range.is_empty() {
        return Err(Error::InsufficientData(format!(
            "empty normalization range {} .. {}",
            range.start, range.end
        )));
    }
    let records: Vec<&ScadaRecord> = series.iter().flat_map(|s| s.slice(range)).collect();
    if records.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "{} record(s) in normalization range {} .. {}, need at least 2",
            records.len(),
            range.start,
            range.end
        )));
    }
    Ok(NormalizationStats::fit(&records))
}

pub fn normalize_target(value_c: f64, stats: &NormalizationStats) -> f64 {
    stats.gear_bearing_temp.normalize(value_c)
}

/// Maps a normalized prediction back to °C.
pub fn denormalize_target(value: f64, stats: &NormalizationStats) -> f64 {
    stats.gear_bearing_temp.denormalize(value)
}

/// One encoded grid step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeatureRow {
    pub timestamp: DateTime<Utc>,
    pub features: [f64; FEATURE_CHANNELS],
    /// Normalized gear-bearing temperature.
    pub target: f64,
}

pub fn encode_features(series: &TurbineSeries, stats: &NormalizationStats) -> Vec<FeatureRow> {
    series
        .records()
        .iter()
        .map(|r| {
            let rad = r.wind_dir.to_radians();
            FeatureRow {
                timestamp: r.timestamp,
                features: [
                    stats.wind_speed.normalize(r.wind_speed),
                    stats.ambient_temp.normalize(r.ambient_temp),
                    rad.sin(),
                    rad.cos(),
                ],
                target: normalize_target(r.gear_bearing_temp, stats),
            }
        })
        .collect()
}

/// A trailing window of encoded features with the target at its last step.
///
/// Windows built from the same rows share one buffer.
#[derive(Debug, Clone)]
pub struct WindowSample {
    rows: Arc<[[f64; FEATURE_CHANNELS]]>,
    start: usize,
    len: usize,
    pub target: f64,
    pub end_timestamp: DateTime<Utc>,
}

impl WindowSample {
    pub fn from_features(
        features: Vec<[f64; FEATURE_CHANNELS]>,
        target: f64,
        end_timestamp: DateTime<Utc>,
    ) -> Self {
        let len = features.len();
        Self {
            rows: features.into(),
            start: 0,
            len,
            target,
            end_timestamp,
        }
    }

    /// `window_len` rows, oldest first.
    pub fn features(&self) -> &[[f64; FEATURE_CHANNELS]] {
        &self.rows[self.start..self.start + self.len]
    }

    pub fn window_len(&self) -> usize {
        self.len
    }
}

impl PartialEq for WindowSample {
    fn eq(&self, other: &Self) -> bool {
        self.target == other.target
            && self.end_timestamp == other.end_timestamp
            && self.features() == other.features()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WindowedDataset {
    pub samples: Vec<WindowSample>,
    pub stats: NormalizationStats,
    pub owner: TurbineId,
}

impl WindowedDataset {
    pub fn new(samples: Vec<WindowSample>, stats: NormalizationStats, owner: TurbineId) -> Self {
        Self {
            samples,
            stats,
            owner,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn first_end(&self) -> Option<DateTime<Utc>> {
        self.samples.first().map(|s| s.end_timestamp)
    }

    pub fn last_end(&self) -> Option<DateTime<Utc>> {
        self.samples.last().map(|s| s.end_timestamp)
    }
}

/// Emits one window per position where `window_len` consecutive grid steps
/// are all present. With `stride > 1` only windows whose final grid slot is
/// a multiple of `stride` are kept, so the selection does not depend on
/// where a slice starts.
pub fn build_windows(
    rows: &[FeatureRow],
    window_len: usize,
    stride: usize,
    stats: NormalizationStats,
    owner: TurbineId,
) -> WindowedDataset {
    assert!(
        window_len >= 1 && stride >= 1,
        "window_len and stride must be >= 1"
    );
    let buffer: Arc<[[f64; FEATURE_CHANNELS]]> = rows.iter().map(|r| r.features).collect();
    let mut samples = Vec::new();
    let mut run = 0usize;
    let mut prev: Option<i64> = None;
    for (j, row) in rows.iter().enumerate() {
        let g = grid_index(row.timestamp);
        run = match prev {
            Some(p) if g == p + 1 => run + 1,
            _ => 1,
        };
        prev = Some(g);
        if run >= window_len && g.rem_euclid(stride as i64) == 0 {
            samples.push(WindowSample {
                rows: Arc::clone(&buffer),
                start: j + 1 - window_len,
                len: window_len,
                target: row.target,
                end_timestamp: row.timestamp,
            });
        }
    }
    WindowedDataset::new(samples, stats, owner)
}

/// First `ceil(train_frac * N)` samples train, the rest validate.
pub fn chronological_split(
    dataset: &WindowedDataset,
    train_frac: f64,
) -> Result<(WindowedDataset, WindowedDataset)> {
    let n = dataset.len();
    if n < 5 {
        return Err(Error::InsufficientData(format!(
            "{}: {n} window(s), need at least 5 to split",
            dataset.owner
        )));
    }
    if !(train_frac > 0.0 && train_frac <= 1.0) {
        return Err(Error::contract(format!(
            "train fraction {train_frac} outside (0, 1]"
        )));
    }
    // guard against 0.8 * 100 = 80.00000000000001
    let n_train = ((train_frac * n as f64 - 1e-9).ceil() as usize).clamp(1, n);
    let part =
        |s: &[WindowSample]| WindowedDataset::new(s.to_vec(), dataset.stats, dataset.owner.clone());
    Ok((
        part(&dataset.samples[..n_train]),
        part(&dataset.samples[n_train..]),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scada_data::{grid_instant, ScadaRecord, TurbineId};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const BASE: i64 = 2_000_000; // arbitrary grid slot

    fn series_from(values: &[(i64, f64, f64, f64, f64)]) -> TurbineSeries {
        let recs = values
            .iter()
            .map(|&(g, ws, at, wd, gb)| ScadaRecord::new(grid_instant(BASE + g), ws, at, wd, gb))
            .collect();
        TurbineSeries::from_records(TurbineId::new("f", "t"), recs).0
    }

    fn rows_at(slots: &[i64]) -> Vec<FeatureRow> {
        slots
            .iter()
            .map(|&g| FeatureRow {
                timestamp: grid_instant(BASE + g),
                features: [g as f64, 0.0, 0.0, 1.0],
                target: g as f64,
            })
            .collect()
    }

    fn all_range() -> TimeRange {
        TimeRange::new(grid_instant(0), grid_instant(BASE * 2))
    }

    fn id() -> TurbineId {
        TurbineId::new("f", "t")
    }

    #[test]
    fn two_point_stats() {
        let s = series_from(&[(0, 0.0, 5.0, 0.0, 1.0), (1, 2.0, 5.0, 0.0, 3.0)]);
        let st = fit_normalization(&s, all_range()).unwrap();
        assert_eq!(st.wind_speed.mean, 1.0);
        assert_eq!(st.wind_speed.std, 1.0);
        assert!(!st.wind_speed.degenerate);
    }

    #[test]
    fn constant_channel_is_flagged() {
        let s = series_from(&[
            (0, 1.0, 5.0, 0.0, 1.0),
            (1, 2.0, 5.0, 0.0, 3.0),
            (2, 3.0, 5.0, 0.0, 3.0),
        ]);
        let st = fit_normalization(&s, all_range()).unwrap();
        assert_eq!(st.ambient_temp.std, 1.0);
        assert!(st.ambient_temp.degenerate);
        assert_eq!(st.ambient_temp.mean, 5.0);
        // degenerate channel denormalizes as a pure shift
        let mut gb = st;
        gb.gear_bearing_temp = st.ambient_temp;
        assert_eq!(denormalize_target(2.5, &gb), 7.5);
    }

    #[test]
    fn too_few_records_in_range() {
        let s = series_from(&[(0, 1.0, 5.0, 0.0, 1.0), (10, 2.0, 5.0, 0.0, 3.0)]);
        let r = TimeRange::new(grid_instant(BASE), grid_instant(BASE + 5));
        assert!(matches!(
            fit_normalization(&s, r),
            Err(Error::InsufficientData(_))
        ));
    }

    #[test]
    fn random_stats_match_welford_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let vals: Vec<(i64, f64, f64, f64, f64)> = (0..1000)
            .map(|i| {
                (
                    i,
                    rng.gen_range(0.0..25.0),
                    rng.gen_range(-10.0..30.0),
                    rng.gen_range(0.0..360.0),
                    rng.gen_range(20.0..80.0),
                )
            })
            .collect();
        let s = series_from(&vals);
        let st = fit_normalization(&s, all_range()).unwrap();
        // Welford's online algorithm as an independent route
        let welford = |xs: Vec<f64>| {
            let (mut n, mut mean, mut m2) = (0.0, 0.0, 0.0);
            for x in xs {
                n += 1.0;
                let d = x - mean;
                mean += d / n;
                m2 += d * (x - mean);
            }
            (mean, (m2 / n).sqrt())
        };
        let (m, sd) = welford(vals.iter().map(|v| v.1).collect());
        assert!((st.wind_speed.mean - m).abs() < 1e-10);
        assert!((st.wind_speed.std - sd).abs() < 1e-10);
        let (m, sd) = welford(vals.iter().map(|v| v.4).collect());
        assert!((st.gear_bearing_temp.mean - m).abs() < 1e-10);
        assert!((st.gear_bearing_temp.std - sd).abs() < 1e-10);
    }

    #[test]
    fn direction_encoding() {
        let s = series_from(&[
            (0, 1.0, 1.0, 0.0, 1.0),
            (1, 1.0, 1.0, 90.0, 1.0),
            (2, 1.0, 1.0, 360.0, 1.0),
        ]);
        let rows = encode_features(&s, &NormalizationStats::identity());
        assert_eq!(rows[0].features[2..], [0.0, 1.0]);
        assert!((rows[1].features[2] - 1.0).abs() < 1e-15);
        assert!(rows[1].features[3].abs() < 1e-15);
        assert_eq!(rows[2].features, rows[0].features);
    }

    #[test]
    fn normalization_round_trip() {
        let stats = ChannelStats {
            mean: 50.0,
            std: 7.3,
            degenerate: false,
        };
        let st = NormalizationStats {
            gear_bearing_temp: stats,
            ..NormalizationStats::identity()
        };
        assert_eq!(denormalize_target(0.0, &st), 50.0);
        for v in [-20.0, 0.0, 33.3, 119.9] {
            assert!((denormalize_target(normalize_target(v, &st), &st) - v).abs() < 1e-12);
        }
    }

    #[test]
    fn window_counts_on_contiguous_rows() {
        let st = NormalizationStats::identity();
        let slots: Vec<i64> = (0..144).collect();
        assert_eq!(build_windows(&rows_at(&slots), 144, 1, st, id()).len(), 1);
        let slots: Vec<i64> = (0..150).collect();
        let ds = build_windows(&rows_at(&slots), 144, 1, st, id());
        assert_eq!(ds.len(), 7);
        assert_eq!(ds.samples[0].features().len(), 144);
        assert_eq!(ds.samples[6].target, 149.0);
        assert_eq!(ds.samples[6].features()[0][0], 6.0);
    }

    /// Counts windows by checking every candidate end position directly.
    fn brute_force_count(present: &[bool], window_len: usize, stride: usize) -> usize {
        (0..present.len())
            .filter(|&end| end + 1 >= window_len)
            .filter(|&end| ((BASE + end as i64).rem_euclid(stride as i64)) == 0)
            .filter(|&end| present[end + 1 - window_len..=end].iter().all(|&p| p))
            .count()
    }

    #[test]
    fn one_missing_step_matches_brute_force() {
        let present: Vec<bool> = (0..300).map(|i| i != 150).collect();
        let slots: Vec<i64> = (0..300).filter(|&i| i != 150).collect();
        let ds = build_windows(
            &rows_at(&slots),
            144,
            1,
            NormalizationStats::identity(),
            id(),
        );
        assert_eq!(ds.len(), brute_force_count(&present, 144, 1));
        assert_eq!(ds.len(), (150 - 144 + 1) + (149 - 144 + 1));
    }

    proptest! {
        #[test]
        fn window_count_matches_brute_force(
            present in prop::collection::vec(prop::bool::weighted(0.9), 1..400),
            window_len in 1usize..40,
            stride in 1usize..5,
        ) {
            let slots: Vec<i64> = present.iter().enumerate().filter(|(_, &p)| p).map(|(i, _)| i as i64).collect();
            let ds = build_windows(&rows_at(&slots), window_len, stride, NormalizationStats::identity(), id());
            prop_assert_eq!(ds.len(), brute_force_count(&present, window_len, stride));
            for s in &ds.samples {
                let f = s.features();
                // every window spans consecutive slots ending at its target slot
                prop_assert_eq!(f.len(), window_len);
                prop_assert_eq!(f[window_len - 1][0], s.target);
                prop_assert_eq!(f[window_len - 1][0] - f[0][0], (window_len - 1) as f64);
            }
        }

        #[test]
        fn direction_encoding_is_on_unit_circle(dirs in prop::collection::vec(0.0f64..360.0, 1..50)) {
            let vals: Vec<_> = dirs.iter().enumerate().map(|(i, &d)| (i as i64, 1.0, 1.0, d, 1.0)).collect();
            for r in encode_features(&series_from(&vals), &NormalizationStats::identity()) {
                let (s, c) = (r.features[2], r.features[3]);
                prop_assert!((s * s + c * c - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn split_sizes() {
        let st = NormalizationStats::identity();
        let mk = |n: i64| build_windows(&rows_at(&(0..n).collect::<Vec<_>>()), 1, 1, st, id());
        let (tr, va) = chronological_split(&mk(100), 0.8).unwrap();
        assert_eq!((tr.len(), va.len()), (80, 20));
        assert!(tr.last_end().unwrap() <= va.first_end().unwrap());
        let (tr, va) = chronological_split(&mk(5), 0.8).unwrap();
        assert_eq!((tr.len(), va.len()), (4, 1));
        assert!(matches!(
            chronological_split(&mk(4), 0.8),
            Err(Error::InsufficientData(_))
        ));
        assert_eq!(tr.stats, st);
    }
}
