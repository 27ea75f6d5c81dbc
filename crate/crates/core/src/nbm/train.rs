use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::network::Network;
use super::ModelParameters;
use crate::error::{Error, Result};
use crate::scada_data::{denormalize_target, WindowSample, WindowedDataset};
use crate::seed::derive_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    #[default]
    SquaredError,
    AbsoluteError,
}

impl LossKind {
    fn value(self, err: f64) -> f64 {
        match self {
            LossKind::SquaredError => err * err,
            LossKind::AbsoluteError => err.abs(),
        }
    }

    fn derivative(self, err: f64) -> f64 {
        match self {
            LossKind::SquaredError => 2.0 * err,
            LossKind::AbsoluteError => {
                if err > 0.0 {
                    1.0
                } else if err < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    #[default]
    Adam,
    /// Plain mini-batch gradient descent.
    Sgd,
}

/// `(mu / 2) * ||params - anchor||^2` added to the local objective.
#[derive(Debug, Clone, PartialEq)]
pub struct ProximalTerm {
    pub mu: f64,
    pub anchor: ModelParameters,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub loss: LossKind,
    pub optimizer: Optimizer,
    pub adam: AdamConfig,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    #[serde(skip)]
    pub proximal: Option<ProximalTerm>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            loss: LossKind::SquaredError,
            optimizer: Optimizer::Adam,
            adam: AdamConfig::default(),
            learning_rate: 1e-3,
            batch_size: 64,
            epochs: 1,
            seed: 0,
            proximal: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "train.learning_rate must be a finite value >= 0, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be >= 1".into()));
        }
        if let Some(p) = &self.proximal {
            if p.mu.is_nan() || p.mu < 0.0 {
                return Err(Error::Config(format!(
                    "proximal mu must be >= 0, got {}",
                    p.mu
                )));
            }
        }
        Ok(())
    }
}

fn data_loss_and_grad(
    net: &Network,
    params: &ModelParameters,
    batch: &[&WindowSample],
    loss: LossKind,
    grad: &mut [f64],
) -> Result<f64> {
    let tape = net.forward_tape(&params.values, batch)?;
    let n = batch.len() as f64;
    let mut total = 0.0;
    let d_out: Vec<f64> = tape
        .outputs
        .iter()
        .zip(batch)
        .map(|(&pred, s)| {
            let err = pred - s.target;
            total += loss.value(err);
            loss.derivative(err) / n
        })
        .collect();
    net.backward(&params.values, &tape, &d_out, grad);
    Ok(total / n)
}

fn add_proximal(params: &ModelParameters, prox: &ProximalTerm, grad: &mut [f64]) -> Result<f64> {
    params.ensure_same_layout(&prox.anchor)?;
    let mut sq = 0.0;
    for ((g, w), a) in grad.iter_mut().zip(&params.values).zip(&prox.anchor.values) {
        let d = w - a;
        sq += d * d;
        *g += prox.mu * d;
    }
    Ok(0.5 * prox.mu * sq)
}

/// Mean per-sample loss (plus the proximal penalty when configured) and its
/// exact gradient.
pub fn loss_and_grad(
    params: &ModelParameters,
    batch: &[WindowSample],
    config: &TrainConfig,
) -> Result<(f64, Vec<f64>)> {
    if batch.is_empty() {
        return Err(Error::contract("loss_and_grad called with an empty batch"));
    }
    let net = Network::new(params.config(), params);
    let refs: Vec<&WindowSample> = batch.iter().collect();
    let mut grad = vec![0.0; params.len()];
    let mut loss = data_loss_and_grad(&net, params, &refs, config.loss, &mut grad)?;
    if let Some(prox) = &config.proximal {
        loss += add_proximal(params, prox, &mut grad)?;
    }
    Ok((loss, grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    /// Global epoch index within the trainer's lifetime.
    pub epoch: usize,
    /// Mean data loss over the epoch's mini-batches (pre-update values).
    pub train_loss: f64,
    /// Data loss on the validation set after the epoch; `None` without one.
    pub val_loss: Option<f64>,
}

#[derive(Debug, Clone)]
struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

/// Mini-batch trainer whose Adam moment estimates and epoch counter survive across
/// calls, so a client can resume where the previous round stopped.
#[derive(Debug, Clone)]
pub struct LocalTrainer {
    config: TrainConfig,
    adam: Option<AdamState>,
    epochs_done: usize,
}

impl LocalTrainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            adam: None,
            epochs_done: 0,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn set_proximal(&mut self, proximal: Option<ProximalTerm>) {
        self.config.proximal = proximal;
    }

    pub fn epochs_done(&self) -> usize {
        self.epochs_done
    }

    /// Shuffle order of epoch `epoch`, shared by every trainer with the same seed.
    pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &["epoch", &epoch.to_string()]));
        order.shuffle(&mut rng);
        order
    }

    /// Runs `epochs` epochs of mini-batch training in place.
    pub fn run(
        &mut self,
        params: &mut ModelParameters,
        train: &WindowedDataset,
        val: Option<&WindowedDataset>,
        epochs: usize,
    ) -> Result<Vec<EpochLoss>> {
        if train.is_empty() {
            return Err(Error::contract(format!(
                "{}: cannot train on an empty training set",
                train.owner
            )));
        }
        if let Some(s) = train.samples.first() {
            params.check_input(s)?;
        }
        let net = Network::new(params.config(), params);
        let cfg = &self.config;
        let adam = self.adam.get_or_insert_with(|| AdamState {
            m: vec![0.0; params.len()],
            v: vec![0.0; params.len()],
            step: 0,
        });
        if adam.m.len() != params.len() {
            return Err(Error::contract(
                "optimizer state does not match parameter layout",
            ));
        }
        let mut history = Vec::with_capacity(epochs);
        let mut grad = vec![0.0; params.len()];
        for _ in 0..epochs {
            let epoch = self.epochs_done;
            let order = Self::epoch_order(cfg.seed, epoch, train.len());
            let mut loss_sum = 0.0;
            for chunk in order.chunks(cfg.batch_size) {
                let batch: Vec<&WindowSample> = chunk.iter().map(|&i| &train.samples[i]).collect();
                grad.fill(0.0);
                let loss = data_loss_and_grad(&net, params, &batch, cfg.loss, &mut grad)?;
                loss_sum += loss * batch.len() as f64;
                if let Some(prox) = &cfg.proximal {
                    add_proximal(params, prox, &mut grad)?;
                }
                let lr = cfg.learning_rate;
                match cfg.optimizer {
                    Optimizer::Sgd => {
                        for (w, g) in params.values.iter_mut().zip(&grad) {
                            *w -= lr * g;
                        }
                    }
                    Optimizer::Adam => {
                        adam.step += 1;
                        let AdamConfig {
                            beta1,
                            beta2,
                            epsilon,
                        } = cfg.adam;
                        let bc1 = 1.0 - beta1.powi(adam.step as i32);
                        let bc2 = 1.0 - beta2.powi(adam.step as i32);
                        for (((w, g), m), v) in params
                            .values
                            .iter_mut()
                            .zip(&grad)
                            .zip(adam.m.iter_mut())
                            .zip(adam.v.iter_mut())
                        {
                            *m = beta1 * *m + (1.0 - beta1) * g;
                            *v = beta2 * *v + (1.0 - beta2) * g * g;
                            let m_hat = *m / bc1;
                            let v_hat = *v / bc2;
                            *w -= lr * m_hat / (v_hat.sqrt() + epsilon);
                        }
                    }
                }
            }
            let val_loss = match val {
                Some(v) if !v.is_empty() => Some(evaluate_loss(params, v, cfg.loss)?),
                _ => None,
            };
            history.push(EpochLoss {
                epoch,
                train_loss: loss_sum / train.len() as f64,
                val_loss,
            });
            self.epochs_done += 1;
        }
        Ok(history)
    }
}

/// Trains a copy of `params` for `config.epochs` epochs with a fresh optimizer.
pub fn train_epochs(
    params: &ModelParameters,
    train: &WindowedDataset,
    val: &WindowedDataset,
    config: &TrainConfig,
) -> Result<(ModelParameters, Vec<EpochLoss>)> {
    let mut trainer = LocalTrainer::new(config.clone())?;
    let mut p = params.clone();
    let history = trainer.run(&mut p, train, Some(val), config.epochs)?;
    Ok((p, history))
}

/// Normalized predictions for every sample.
pub fn predict(params: &ModelParameters, dataset: &WindowedDataset) -> Result<Vec<f64>> {
    super::forward_batch(params, &dataset.samples)
}

/// Mean data loss over a dataset in normalized units.
pub fn evaluate_loss(
    params: &ModelParameters,
    dataset: &WindowedDataset,
    loss: LossKind,
) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::contract(format!(
            "{}: empty evaluation set",
            dataset.owner
        )));
    }
    let preds = predict(params, dataset)?;
    let total: f64 = preds
        .iter()
        .zip(&dataset.samples)
        .map(|(p, s)| loss.value(p - s.target))
        .sum();
    Ok(total / dataset.len() as f64)
}

/// Mean absolute error in °C after denormalizing predictions and targets.
pub fn evaluate_mae(params: &ModelParameters, dataset: &WindowedDataset) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::contract(format!(
            "{}: empty evaluation set",
            dataset.owner
        )));
    }
    let preds = predict(params, dataset)?;
    let st = &dataset.stats;
    let total: f64 = preds
        .iter()
        .zip(&dataset.samples)
        .map(|(&p, s)| (denormalize_target(p, st) - denormalize_target(s.target, st)).abs())
        .sum();
    Ok(total / dataset.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nbm::{forward, init_model, ModelConfig};
    use crate::scada_data::{ChannelStats, NormalizationStats, TurbineId};
    use chrono::{Duration, TimeZone, Utc};
    use rand::{Rng, SeedableRng};

    fn tiny() -> ModelConfig {
        ModelConfig {
            input_channels: 4,
            window_len: 5,
            lstm_sizes: vec![3],
            fc_sizes: vec![3],
        }
    }

    fn dataset(n: usize, window: usize, seed: u64, stats: NormalizationStats) -> WindowedDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t0 = Utc.with_ymd_and_hms(2017, 1, 1, 0, 0, 0).unwrap();
        let samples = (0..n)
            .map(|i| {
                let f = (0..window)
                    .map(|_| {
                        let a: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
                        [
                            rng.gen_range(-1.5..1.5),
                            rng.gen_range(-1.5..1.5),
                            a.sin(),
                            a.cos(),
                        ]
                    })
                    .collect();
                WindowSample::from_features(
                    f,
                    rng.gen_range(-1.0..1.0),
                    t0 + Duration::minutes(10 * i as i64),
                )
            })
            .collect();
        WindowedDataset::new(samples, stats, TurbineId::new("f", "t"))
    }

    #[test]
    fn perfect_prediction_has_zero_loss_and_gradient() {
        // zero parameters predict 0, so targets of 0 are fitted exactly
        let p = ModelParameters::zeros(&tiny()).unwrap();
        let mut ds = dataset(4, 5, 1, NormalizationStats::identity());
        for s in &mut ds.samples {
            s.target = 0.0;
        }
        let (loss, grad) = loss_and_grad(&p, &ds.samples, &TrainConfig::default()).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn empty_batch_is_a_contract_error() {
        let p = init_model(&tiny(), 0).unwrap();
        assert!(matches!(
            loss_and_grad(&p, &[], &TrainConfig::default()),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn proximal_gradient_is_additive() {
        let p = init_model(&tiny(), 3).unwrap();
        let anchor = init_model(&tiny(), 4).unwrap();
        let ds = dataset(6, 5, 2, NormalizationStats::identity());
        let plain = TrainConfig::default();
        let (l0, g0) = loss_and_grad(&p, &ds.samples, &plain).unwrap();
        for mu in [0.01, 1.0, 37.5] {
            let cfg = TrainConfig {
                proximal: Some(ProximalTerm {
                    mu,
                    anchor: anchor.clone(),
                }),
                ..plain.clone()
            };
            let (l1, g1) = loss_and_grad(&p, &ds.samples, &cfg).unwrap();
            let mut sq = 0.0;
            for i in 0..p.len() {
                let d = p.values[i] - anchor.values[i];
                sq += d * d;
                assert!((g1[i] - g0[i] - mu * d).abs() < 1e-12);
            }
            assert!((l1 - l0 - 0.5 * mu * sq).abs() < 1e-12);
        }
    }

    #[test]
    fn sgd_full_batch_step_is_plain_gradient_descent() {
        let p = init_model(&tiny(), 3).unwrap();
        let ds = dataset(6, 5, 2, NormalizationStats::identity());
        let cfg = TrainConfig {
            optimizer: Optimizer::Sgd,
            learning_rate: 0.1,
            batch_size: 6,
            epochs: 1,
            ..TrainConfig::default()
        };
        let (_, grad) = loss_and_grad(&p, &ds.samples, &cfg).unwrap();
        let (out, _) = train_epochs(&p, &ds, &ds, &cfg).unwrap();
        // the full batch sees the samples in shuffled order
        for ((o, v), g) in out.values.iter().zip(&p.values).zip(&grad) {
            assert!((o - (v - 0.1 * g)).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_epochs_or_zero_rate_leave_parameters_alone() {
        let p = init_model(&tiny(), 3).unwrap();
        let ds = dataset(10, 5, 2, NormalizationStats::identity());
        let cfg = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        let (out, hist) = train_epochs(&p, &ds, &ds, &cfg).unwrap();
        assert_eq!(out, p);
        assert!(hist.is_empty());
        let cfg = TrainConfig {
            epochs: 3,
            learning_rate: 0.0,
            ..TrainConfig::default()
        };
        let (out, hist) = train_epochs(&p, &ds, &ds, &cfg).unwrap();
        assert_eq!(out, p);
        assert_eq!(
            hist.iter().map(|h| h.epoch).collect::<Vec<_>>(),
            vec![0, 1, 2]
        );
    }

    #[test]
    fn single_sample_is_memorized() {
        let p = init_model(&tiny(), 3).unwrap();
        let mut ds = dataset(1, 5, 2, NormalizationStats::identity());
        ds.samples[0].target = 0.7;
        let cfg = TrainConfig {
            epochs: 200,
            learning_rate: 1e-2,
            ..TrainConfig::default()
        };
        let (_, hist) = train_epochs(&p, &ds, &ds, &cfg).unwrap();
        let last = hist.last().unwrap();
        assert!(last.val_loss.unwrap() < 1e-3, "loss {:?}", last);
    }

    #[test]
    fn empty_training_set_is_rejected() {
        let p = init_model(&tiny(), 3).unwrap();
        let ds = dataset(0, 5, 2, NormalizationStats::identity());
        assert!(matches!(
            train_epochs(&p, &ds, &ds, &TrainConfig::default()),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn training_is_deterministic() {
        let p = init_model(&tiny(), 3).unwrap();
        let ds = dataset(40, 5, 2, NormalizationStats::identity());
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 8,
            seed: 99,
            ..TrainConfig::default()
        };
        let (a, _) = train_epochs(&p, &ds, &ds, &cfg).unwrap();
        let (b, _) = train_epochs(&p, &ds, &ds, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn resumed_training_equals_one_long_run() {
        let p = init_model(&tiny(), 3).unwrap();
        let ds = dataset(30, 5, 2, NormalizationStats::identity());
        let cfg = TrainConfig {
            epochs: 4,
            batch_size: 7,
            seed: 5,
            ..TrainConfig::default()
        };
        let (once, _) = train_epochs(&p, &ds, &ds, &cfg).unwrap();
        let mut trainer = LocalTrainer::new(cfg).unwrap();
        let mut q = p.clone();
        trainer.run(&mut q, &ds, None, 1).unwrap();
        trainer.run(&mut q, &ds, None, 3).unwrap();
        assert_eq!(once, q);
    }

    #[test]
    fn mae_cases() {
        let stats = NormalizationStats {
            gear_bearing_temp: ChannelStats {
                mean: 40.0,
                std: 4.0,
                degenerate: false,
            },
            ..NormalizationStats::identity()
        };
        let cfg = tiny();
        let mut p = ModelParameters::zeros(&cfg).unwrap();
        let mut ds = dataset(25, 5, 7, stats);
        // zero model predicts normalized 0 (= 40 °C)
        for s in &mut ds.samples {
            s.target = 0.0;
        }
        assert_eq!(evaluate_mae(&p, &ds).unwrap(), 0.0);
        // output bias of +0.25 normalized units is +1 °C everywhere
        p.tensor_mut("out.bias").unwrap()[0] = 0.25;
        assert!((evaluate_mae(&p, &ds).unwrap() - 1.0).abs() < 1e-12);

        let p = init_model(&cfg, 11).unwrap();
        let ds = dataset(25, 5, 8, stats);
        let mut acc = 0.0;
        for s in &ds.samples {
            let pred = forward(&p, s).unwrap() * 4.0 + 40.0;
            let actual = s.target * 4.0 + 40.0;
            acc += (pred - actual).abs();
        }
        assert!((evaluate_mae(&p, &ds).unwrap() - acc / 25.0).abs() < 1e-10);
        let empty = dataset(0, 5, 8, stats);
        assert!(evaluate_mae(&p, &empty).is_err());
    }
}
