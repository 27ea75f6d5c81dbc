use serde::{Deserialize, Serialize};

use super::{FederatedClient, LocalUpdate};
use crate::error::{Error, Result};
use crate::nbm::{evaluate_loss, LocalTrainer, ModelParameters, ProximalTerm, TrainConfig};
use crate::scada_data::{TurbineId, WindowedDataset};
use crate::seed::derive_seed;

/// One turbine inside a federation: its private datasets and a trainer whose
/// optimizer state persists from round to round.
#[derive(Debug, Clone)]
pub struct ClientHandle {
    owner: TurbineId,
    train: WindowedDataset,
    val: WindowedDataset,
    trainer: LocalTrainer,
}

impl ClientHandle {
    /// The client seed is `config.seed`; both datasets must share an owner.
    pub fn new(train: WindowedDataset, val: WindowedDataset, config: TrainConfig) -> Result<Self> {
        if train.owner != val.owner {
            return Err(Error::contract(format!(
                "train set of {} paired with validation set of {}",
                train.owner, val.owner
            )));
        }
        Ok(Self {
            owner: train.owner.clone(),
            train,
            val,
            trainer: LocalTrainer::new(config)?,
        })
    }

    pub fn owner(&self) -> &TurbineId {
        &self.owner
    }

    pub fn seed(&self) -> u64 {
        self.trainer.config().seed
    }

    pub fn train_config(&self) -> &TrainConfig {
        self.trainer.config()
    }

    pub fn train_set(&self) -> &WindowedDataset {
        &self.train
    }

    pub fn val_set(&self) -> &WindowedDataset {
        &self.val
    }

    /// Forgets optimizer state and epoch count.
    pub fn reset(&mut self) {
        let mut config = self.trainer.config().clone();
        config.proximal = None;
        self.trainer = LocalTrainer::new(config).expect("config was validated on construction");
    }

    /// Trains `params` in place for `epochs` epochs with the persistent trainer.
    pub(crate) fn train_in_place(
        &mut self,
        params: &mut ModelParameters,
        epochs: usize,
    ) -> Result<()> {
        self.trainer.set_proximal(None);
        self.trainer
            .run(params, &self.train, Some(&self.val), epochs)?;
        Ok(())
    }
}

impl FederatedClient for ClientHandle {
    fn id(&self) -> &TurbineId {
        &self.owner
    }

    fn sample_count(&self) -> usize {
        self.train.len()
    }

    fn local_update(
        &mut self,
        global: &ModelParameters,
        epochs: usize,
        proximal_mu: Option<f64>,
    ) -> Result<LocalUpdate> {
        let mut params = global.clone();
        self.trainer
            .set_proximal(proximal_mu.map(|mu| ProximalTerm {
                mu,
                anchor: global.clone(),
            }));
        let history = self
            .trainer
            .run(&mut params, &self.train, Some(&self.val), epochs);
        self.trainer.set_proximal(None);
        let last = history?.pop();
        Ok(LocalUpdate {
            params,
            sample_count: self.train.len(),
            train_loss: last.map_or(f64::NAN, |e| e.train_loss),
            val_loss: last.and_then(|e| e.val_loss),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FineTuneConfig {
    pub learning_rate: f64,
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
}

impl Default for FineTuneConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            max_epochs: 20,
            patience: 5,
        }
    }
}

impl FineTuneConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "fine_tune.learning_rate must be finite and >= 0, got {}",
                self.learning_rate
            )));
        }
        if self.patience == 0 {
            return Err(Error::Config("fine_tune.patience must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FineTuneReport {
    pub epochs_run: usize,
    /// 0 when the starting model was never beaten on validation.
    pub best_epoch: usize,
    /// Validation loss before training, then after each epoch.
    pub val_losses: Vec<f64>,
}

/// Continues training `global` on the client's data with a fresh optimizer
/// and returns the parameters with the lowest validation loss seen,
/// counting the starting point. Without a validation set the last epoch wins.
pub fn fine_tune(
    global: &ModelParameters,
    client: &ClientHandle,
    config: &FineTuneConfig,
) -> Result<(ModelParameters, FineTuneReport)> {
    config.validate()?;
    if client.train.is_empty() {
        return Err(Error::contract(format!(
            "{}: cannot fine-tune without training windows",
            client.owner
        )));
    }
    let mut train_config = client.trainer.config().clone();
    train_config.learning_rate = config.learning_rate;
    train_config.seed = derive_seed(client.seed(), &["fine_tune"]);
    train_config.proximal = None;
    let mut trainer = LocalTrainer::new(train_config)?;

    let loss_kind = client.trainer.config().loss;
    let has_val = !client.val.is_empty();
    let mut params = global.clone();
    let mut best = global.clone();
    let mut report = FineTuneReport {
        epochs_run: 0,
        best_epoch: 0,
        val_losses: Vec::new(),
    };
    let mut best_loss = f64::INFINITY;
    if has_val {
        best_loss = evaluate_loss(global, &client.val, loss_kind)?;
        report.val_losses.push(best_loss);
    }
    for epoch in 1..=config.max_epochs {
        let history = trainer.run(
            &mut params,
            &client.train,
            has_val.then_some(&client.val),
            1,
        )?;
        report.epochs_run = epoch;
        match history[0].val_loss {
            Some(v) => {
                report.val_losses.push(v);
                if v < best_loss {
                    best_loss = v;
                    best.values.copy_from_slice(&params.values);
                    report.best_epoch = epoch;
                } else if epoch - report.best_epoch >= config.patience {
                    break;
                }
            }
            None => {
                best.values.copy_from_slice(&params.values);
                report.best_epoch = epoch;
            }
        }
    }
    Ok((best, report))
}
