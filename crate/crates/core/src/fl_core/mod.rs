//! Federation engine: weighted aggregation, FedAvg/FedProx rounds,
//! fine-tuning and the three collaboration strategies.
//!
//! The engine talks to clients only through [`FederatedClient`], which hands
//! back parameter vectors, sample counts and scalar losses. Training data
//! never crosses that boundary.

mod client;
mod strategy;

use std::collections::BTreeSet;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nbm::{init_model, ModelConfig, ModelParameters};
use crate::scada_data::TurbineId;

pub use client::{fine_tune, ClientHandle, FineTuneConfig, FineTuneReport};
pub use strategy::{run_strategy, FederationLog, StrategyKind, StrategyOutcome, StrategySpec};

/// Server-side aggregation rule; FedProx also adds a proximal term on clients.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Algorithm {
    #[default]
    FedAvg,
    FedProx {
        mu: f64,
    },
}

impl Algorithm {
    pub fn proximal_mu(self) -> Option<f64> {
        match self {
            Algorithm::FedAvg => None,
            Algorithm::FedProx { mu } => Some(mu),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FederationConfig {
    pub rounds: usize,
    pub local_epochs: usize,
    pub algorithm: Algorithm,
    /// Seed of the initial global model.
    pub init_seed: u64,
}

impl Default for FederationConfig {
    fn default() -> Self {
        Self {
            rounds: 50,
            local_epochs: 1,
            algorithm: Algorithm::FedAvg,
            init_seed: 0,
        }
    }
}

impl FederationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 {
            return Err(Error::Config("federation.rounds must be >= 1".into()));
        }
        if self.local_epochs == 0 {
            return Err(Error::Config("federation.local_epochs must be >= 1".into()));
        }
        if let Algorithm::FedProx { mu } = self.algorithm {
            if !(mu >= 0.0 && mu.is_finite()) {
                return Err(Error::Config(format!(
                    "fedprox mu must be finite and >= 0, got {mu}"
                )));
            }
        }
        Ok(())
    }

    /// Total local epochs a client runs over a whole federation.
    pub fn epoch_budget(&self) -> usize {
        self.rounds * self.local_epochs
    }
}

/// What a client returns to the server after local training.
#[derive(Debug, Clone)]
pub struct LocalUpdate {
    pub params: ModelParameters,
    pub sample_count: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
}

/// A federation participant.
pub trait FederatedClient: Send {
    fn id(&self) -> &TurbineId;

    /// Number of local training windows; clients with zero sit out.
    fn sample_count(&self) -> usize;

    /// Trains a copy of `global` for `epochs` epochs. With `proximal_mu`
    /// the local objective is anchored to `global`.
    fn local_update(
        &mut self,
        global: &ModelParameters,
        epochs: usize,
        proximal_mu: Option<f64>,
    ) -> Result<LocalUpdate>;
}

/// `n_i / n` for every count.
pub fn aggregation_weights(counts: &[usize]) -> Result<Vec<f64>> {
    if counts.is_empty() {
        return Err(Error::contract("no clients to aggregate"));
    }
    if let Some(i) = counts.iter().position(|&n| n == 0) {
        return Err(Error::contract(format!(
            "client {i} has a sample count of 0"
        )));
    }
    let total: usize = counts.iter().sum();
    Ok(counts.iter().map(|&n| n as f64 / total as f64).collect())
}

/// Sample-count weighted mean `sum_i (n_i / n) * w_i` of parameter vectors.
///
/// The sum is taken in a canonical order and relative to the first vector in
/// that order, so the result does not depend on how `updates` is ordered and
/// identical inputs come back unchanged bit for bit.
pub fn aggregate_weighted(updates: &[(ModelParameters, usize)]) -> Result<ModelParameters> {
    let counts: Vec<usize> = updates.iter().map(|(_, n)| *n).collect();
    let weights = aggregation_weights(&counts)?;
    let first = &updates[0].0;
    for (p, _) in &updates[1..] {
        first.ensure_same_layout(p)?;
    }
    let mut order: Vec<usize> = (0..updates.len()).collect();
    order.sort_by(|&a, &b| {
        counts[a].cmp(&counts[b]).then_with(|| {
            let (va, vb) = (&updates[a].0.values, &updates[b].0.values);
            va.iter()
                .zip(vb)
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
        })
    });
    let base = &updates[order[0]].0;
    let mut out = base.values.clone();
    for &i in &order[1..] {
        let w = weights[i];
        for ((o, x), b) in out.iter_mut().zip(&updates[i].0.values).zip(&base.values) {
            *o += w * (x - b);
        }
    }
    base.with_values(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientRound {
    pub farm_id: String,
    pub turbine_id: String,
    pub sample_count: usize,
    pub weight: f64,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundResult {
    /// 1-based round index.
    pub round: usize,
    /// Participating clients in (farm, turbine) order.
    pub clients: Vec<ClientRound>,
    pub excluded: Vec<TurbineId>,
    pub global_norm: f64,
}

impl RoundResult {
    pub fn weight_sum(&self) -> f64 {
        self.clients.iter().map(|c| c.weight).sum()
    }
}

#[derive(Debug, Clone)]
pub struct FederationResult {
    pub global: ModelParameters,
    pub rounds: Vec<RoundResult>,
}

/// One round: every client trains from `global`, the server averages.
///
/// Clients may run in parallel on the current rayon pool; the result does
/// not depend on scheduling or on the order of `clients`.
pub fn run_round<C: FederatedClient>(
    global: &ModelParameters,
    clients: &mut [C],
    config: &FederationConfig,
    round: usize,
) -> Result<(ModelParameters, RoundResult)> {
    config.validate()?;
    if clients.is_empty() {
        return Err(Error::contract("a round needs at least one client"));
    }
    let mut seen = BTreeSet::new();
    for c in clients.iter() {
        if !seen.insert(c.id().clone()) {
            return Err(Error::contract(format!("client {} appears twice", c.id())));
        }
    }

    let mut excluded = Vec::new();
    let mut active: Vec<&mut C> = Vec::with_capacity(clients.len());
    for c in clients.iter_mut() {
        if c.sample_count() == 0 {
            log::warn!(
                "round {round}: client {} has no training windows, excluded",
                c.id()
            );
            excluded.push(c.id().clone());
        } else {
            active.push(c);
        }
    }
    if active.is_empty() {
        return Err(Error::contract(format!(
            "round {round}: every client was excluded for lack of training data"
        )));
    }

    let mu = config.algorithm.proximal_mu();
    let mut updates: Vec<(TurbineId, LocalUpdate)> = active
        .into_par_iter()
        .map(|c| {
            let u = c.local_update(global, config.local_epochs, mu)?;
            Ok((c.id().clone(), u))
        })
        .collect::<Result<_>>()?;
    updates.sort_by(|a, b| a.0.cmp(&b.0));
    excluded.sort();

    let counts: Vec<usize> = updates.iter().map(|(_, u)| u.sample_count).collect();
    let weights = aggregation_weights(&counts)?;
    let log_rows = updates
        .iter()
        .zip(&weights)
        .map(|((id, u), &weight)| ClientRound {
            farm_id: id.farm_id.clone(),
            turbine_id: id.turbine_id.clone(),
            sample_count: u.sample_count,
            weight,
            train_loss: u.train_loss,
            val_loss: u.val_loss,
        })
        .collect();
    let pairs: Vec<(ModelParameters, usize)> = updates
        .into_iter()
        .map(|(_, u)| (u.params, u.sample_count))
        .collect();
    let next = aggregate_weighted(&pairs)?;
    let result = RoundResult {
        round,
        clients: log_rows,
        excluded,
        global_norm: next.norm(),
    };
    debug_assert!((result.weight_sum() - 1.0).abs() <= 1e-12);
    Ok((next, result))
}

/// `config.rounds` sequential rounds starting from `init_model(model, config.init_seed)`.
pub fn run_federation<C: FederatedClient>(
    clients: &mut [C],
    model: &ModelConfig,
    config: &FederationConfig,
) -> Result<FederationResult> {
    config.validate()?;
    let global = init_model(model, config.init_seed)?;
    run_federation_from(global, clients, config)
}

/// Like [`run_federation`] but from a given initial global model.
pub fn run_federation_from<C: FederatedClient>(
    mut global: ModelParameters,
    clients: &mut [C],
    config: &FederationConfig,
) -> Result<FederationResult> {
    config.validate()?;
    let mut rounds = Vec::with_capacity(config.rounds);
    for r in 1..=config.rounds {
        let (next, result) = run_round(&global, clients, config, r)?;
        log::debug!(
            "round {r}/{}: {} clients, |w| = {:.6}",
            config.rounds,
            result.clients.len(),
            result.global_norm
        );
        global = next;
        rounds.push(result);
    }
    Ok(FederationResult { global, rounds })
}

#[derive(Serialize)]
struct RoundLogLine<'a> {
    federation: &'a str,
    #[serde(flatten)]
    round: &'a RoundResult,
}

/// Appends one JSON object per round to `out`.
pub fn write_round_log<W: Write>(
    out: &mut W,
    federation: &str,
    rounds: &[RoundResult],
) -> std::io::Result<()> {
    for round in rounds {
        serde_json::to_writer(&mut *out, &RoundLogLine { federation, round })?;
        out.write_all(b"\n")?;
    }
    Ok(())
}
