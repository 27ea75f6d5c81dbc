#![allow(dead_code)]

use chrono::{Duration, TimeZone, Utc};
use fednbm::fl_core::ClientHandle;
use fednbm::nbm::{ModelConfig, TrainConfig};
use fednbm::scada_data::{NormalizationStats, TurbineId, WindowSample, WindowedDataset};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn tiny_model() -> ModelConfig {
    ModelConfig {
        input_channels: 4,
        window_len: 6,
        lstm_sizes: vec![4],
        fc_sizes: vec![4],
    }
}

/// Windows whose target is a smooth function of the inputs plus `offset`.
pub fn samples(n: usize, window: usize, offset: f64, seed: u64) -> Vec<WindowSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t0 = Utc.with_ymd_and_hms(2017, 1, 1, 0, 0, 0).unwrap();
    (0..n)
        .map(|i| {
            let rows: Vec<[f64; 4]> = (0..window)
                .map(|_| {
                    let a: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
                    [
                        rng.gen_range(-1.0..1.0),
                        rng.gen_range(-1.0..1.0),
                        a.sin(),
                        a.cos(),
                    ]
                })
                .collect();
            let mean_ws = rows.iter().map(|r| r[0]).sum::<f64>() / window as f64;
            let target = 0.8 * mean_ws + 0.3 * rows[window - 1][1] + offset;
            WindowSample::from_features(rows, target, t0 + Duration::minutes(10 * i as i64))
        })
        .collect()
}

pub fn dataset(owner: &TurbineId, samples: Vec<WindowSample>) -> WindowedDataset {
    WindowedDataset::new(samples, NormalizationStats::identity(), owner.clone())
}

pub fn client(
    farm: &str,
    turbine: &str,
    n: usize,
    offset: f64,
    data_seed: u64,
    train: TrainConfig,
) -> ClientHandle {
    let id = TurbineId::new(farm, turbine);
    let all = samples(n, tiny_model().window_len, offset, data_seed);
    let cut = (n * 4) / 5;
    ClientHandle::new(
        dataset(&id, all[..cut].to_vec()),
        dataset(&id, all[cut..].to_vec()),
        train,
    )
    .unwrap()
}

pub fn train_config(seed: u64) -> TrainConfig {
    TrainConfig {
        seed,
        batch_size: 16,
        ..TrainConfig::default()
    }
}
