use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    fine_tune, run_federation, ClientHandle, FederationConfig, FineTuneConfig, RoundResult,
};
use crate::error::{Error, Result};
use crate::nbm::{init_model, ModelConfig, ModelParameters};
use crate::scada_data::TurbineId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    Local,
    IntraFarm,
    InterFarm,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 3] = [
        StrategyKind::Local,
        StrategyKind::IntraFarm,
        StrategyKind::InterFarm,
    ];

    pub fn name(self) -> &'static str {
        match self {
            StrategyKind::Local => "local",
            StrategyKind::IntraFarm => "intra_farm",
            StrategyKind::InterFarm => "inter_farm",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }
}

impl std::fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategySpec {
    pub kind: StrategyKind,
    pub fine_tune: bool,
    #[serde(default)]
    pub fine_tune_config: FineTuneConfig,
}

impl StrategySpec {
    pub fn new(kind: StrategyKind, fine_tune: bool) -> Self {
        Self {
            kind,
            fine_tune,
            fine_tune_config: FineTuneConfig::default(),
        }
    }
}

/// Rounds of one federation and who took part.
#[derive(Debug, Clone)]
pub struct FederationLog {
    pub name: String,
    pub members: Vec<TurbineId>,
    pub rounds: Vec<RoundResult>,
}

#[derive(Debug, Clone)]
pub struct StrategyOutcome {
    pub kind: StrategyKind,
    /// Model each turbine receives before any fine-tuning: its own for
    /// Local, its federation's global model otherwise.
    pub base_models: BTreeMap<TurbineId, ModelParameters>,
    /// Present when the spec asked for fine-tuning.
    pub fine_tuned: Option<BTreeMap<TurbineId, ModelParameters>>,
    pub federations: Vec<FederationLog>,
}

impl StrategyOutcome {
    /// The test-ready model for `id`.
    pub fn deliverable(&self, id: &TurbineId) -> Option<&ModelParameters> {
        match &self.fine_tuned {
            Some(ft) => ft.get(id),
            None => self.base_models.get(id),
        }
    }
}

fn check_fleet(farms: &BTreeMap<String, Vec<ClientHandle>>) -> Result<()> {
    if farms.is_empty() {
        return Err(Error::contract("a strategy needs at least one farm"));
    }
    let mut seen = BTreeSet::new();
    for (farm, clients) in farms {
        if clients.is_empty() {
            return Err(Error::contract(format!("farm {farm} has no clients")));
        }
        for c in clients {
            if &c.owner().farm_id != farm {
                return Err(Error::contract(format!(
                    "client {} listed under farm {farm}",
                    c.owner()
                )));
            }
            if !seen.insert(c.owner().clone()) {
                return Err(Error::contract(format!(
                    "client {} appears twice",
                    c.owner()
                )));
            }
        }
    }
    Ok(())
}

fn federate(
    name: String,
    mut clients: Vec<ClientHandle>,
    model: &ModelConfig,
    fed: &FederationConfig,
) -> Result<(FederationLog, BTreeMap<TurbineId, ModelParameters>)> {
    let members: Vec<TurbineId> = clients.iter().map(|c| c.owner().clone()).collect();
    log::info!("federation {name}: {} clients", members.len());
    let result = run_federation(&mut clients, model, fed)?;
    let models = members
        .iter()
        .map(|id| (id.clone(), result.global.clone()))
        .collect();
    Ok((
        FederationLog {
            name,
            members,
            rounds: result.rounds,
        },
        models,
    ))
}

/// Runs one collaboration strategy over a fleet.
///
/// Clients are cloned and reset first, so the outcome depends only on the
/// inputs. Local training starts from the same initial model as the
/// federations and runs `rounds * local_epochs` epochs.
pub fn run_strategy(
    spec: &StrategySpec,
    farms: &BTreeMap<String, Vec<ClientHandle>>,
    model: &ModelConfig,
    fed: &FederationConfig,
) -> Result<StrategyOutcome> {
    fed.validate()?;
    spec.fine_tune_config.validate()?;
    check_fleet(farms)?;
    let fresh = |cs: &[ClientHandle]| -> Vec<ClientHandle> {
        cs.iter()
            .map(|c| {
                let mut c = c.clone();
                c.reset();
                c
            })
            .collect()
    };

    let mut federations = Vec::new();
    let mut base_models = BTreeMap::new();
    match spec.kind {
        StrategyKind::Local => {
            let all: Vec<ClientHandle> = farms.values().flat_map(|cs| fresh(cs)).collect();
            let trained: Vec<(TurbineId, ModelParameters)> = all
                .into_par_iter()
                .map(|mut c| {
                    let mut p = init_model(model, fed.init_seed)?;
                    c.train_in_place(&mut p, fed.epoch_budget())?;
                    Ok((c.owner().clone(), p))
                })
                .collect::<Result<_>>()?;
            base_models.extend(trained);
        }
        StrategyKind::IntraFarm => {
            for (farm, clients) in farms {
                let (log, models) =
                    federate(format!("intra_farm:{farm}"), fresh(clients), model, fed)?;
                federations.push(log);
                base_models.extend(models);
            }
        }
        StrategyKind::InterFarm => {
            let all: Vec<ClientHandle> = farms.values().flat_map(|cs| fresh(cs)).collect();
            let (log, models) = federate("inter_farm".into(), all, model, fed)?;
            federations.push(log);
            base_models.extend(models);
        }
    }

    let fine_tuned = if spec.fine_tune {
        let clients: Vec<&ClientHandle> = farms.values().flatten().collect();
        let tuned: Vec<(TurbineId, ModelParameters)> = clients
            .into_par_iter()
            .map(|c| {
                let base = &base_models[c.owner()];
                if c.train_set().is_empty() {
                    return Ok((c.owner().clone(), base.clone()));
                }
                let (p, report) = fine_tune(base, c, &spec.fine_tune_config)?;
                log::debug!(
                    "{}: fine-tuned {} epochs, best epoch {}",
                    c.owner(),
                    report.epochs_run,
                    report.best_epoch
                );
                Ok((c.owner().clone(), p))
            })
            .collect::<Result<_>>()?;
        Some(tuned.into_iter().collect())
    } else {
        None
    };

    Ok(StrategyOutcome {
        kind: spec.kind,
        base_models,
        fine_tuned,
        federations,
    })
}
