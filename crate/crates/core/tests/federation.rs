mod common;

use std::collections::BTreeMap;

use common::*;
use fednbm::fl_core::*;
use fednbm::nbm::{
    evaluate_mae, init_model, params_distance, predict, train_epochs, ModelConfig, ModelParameters,
    Optimizer, TrainConfig,
};
use fednbm::scada_data::TurbineId;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn oracle_mean(updates: &[(ModelParameters, usize)]) -> Vec<f64> {
    let n: usize = updates.iter().map(|u| u.1).sum();
    let mut out = vec![0.0; updates[0].0.len()];
    for (p, ni) in updates {
        for (j, v) in p.values.iter().enumerate() {
            out[j] += (*ni as f64 / n as f64) * v;
        }
    }
    out
}

#[test]
fn aggregation_matches_accumulation_loop() {
    let cfg = tiny_model();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for case in 0..50 {
        let k = rng.gen_range(1..=8);
        let updates: Vec<(ModelParameters, usize)> = (0..k)
            .map(|i| {
                let mut p = init_model(&cfg, case * 100 + i).unwrap();
                for v in &mut p.values {
                    *v *= rng.gen_range(0.5..3.0);
                }
                (p, rng.gen_range(1..=100))
            })
            .collect();
        let got = aggregate_weighted(&updates).unwrap();
        for (a, b) in got.values.iter().zip(oracle_mean(&updates)) {
            assert!((a - b).abs() <= 1e-12, "case {case}: {a} vs {b}");
        }
    }
}

#[test]
fn single_client_federation_equals_local_training() {
    let cfg = tiny_model();
    let fed = FederationConfig {
        rounds: 7,
        local_epochs: 1,
        init_seed: 5,
        ..Default::default()
    };
    let c = client("a", "t1", 90, 0.0, 1, train_config(42));
    let (train, val) = (c.train_set().clone(), c.val_set().clone());
    let result = run_federation(&mut [c], &cfg, &fed).unwrap();
    assert_eq!(result.rounds.len(), 7);

    let local_cfg = TrainConfig {
        epochs: 7,
        ..train_config(42)
    };
    let (local, _) = train_epochs(&init_model(&cfg, 5).unwrap(), &train, &val, &local_cfg).unwrap();
    let worst = result
        .global
        .values
        .iter()
        .zip(&local.values)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    assert!(worst <= 1e-9, "max parameter difference {worst}");
}

#[test]
fn identical_clients_reproduce_a_single_update_bitwise() {
    let cfg = tiny_model();
    let global = init_model(&cfg, 3).unwrap();
    let fed = FederationConfig::default();
    let base = client("a", "t", 40, 0.0, 9, train_config(8));
    let mut clients: Vec<ClientHandle> = (0..4)
        .map(|k| {
            let id = TurbineId::new("a", format!("t{k}"));
            ClientHandle::new(
                dataset(&id, base.train_set().samples.clone()),
                dataset(&id, base.val_set().samples.clone()),
                train_config(8),
            )
            .unwrap()
        })
        .collect();
    let (next, round) = run_round(&global, &mut clients, &fed, 1).unwrap();
    let single = base.clone().local_update(&global, 1, None).unwrap();
    assert_eq!(next.values, single.params.values);
    assert!((round.weight_sum() - 1.0).abs() <= 1e-12);
}

#[test]
fn round_is_independent_of_client_order() {
    let cfg = tiny_model();
    let global = init_model(&cfg, 1).unwrap();
    let fed = FederationConfig::default();
    let make = || -> Vec<ClientHandle> {
        (0..4)
            .map(|k| {
                client(
                    "f",
                    &format!("t{k}"),
                    30 + 10 * k,
                    0.2 * k as f64,
                    k as u64,
                    train_config(k as u64),
                )
            })
            .collect()
    };
    let mut forward = make();
    let mut backward = make();
    backward.reverse();
    let (a, ra) = run_round(&global, &mut forward, &fed, 1).unwrap();
    let (b, rb) = run_round(&global, &mut backward, &fed, 1).unwrap();
    assert_eq!(a.values, b.values);
    assert_eq!(ra, rb);
}

#[test]
fn parallel_round_matches_sequential() {
    let cfg = tiny_model();
    let global = init_model(&cfg, 1).unwrap();
    let fed = FederationConfig::default();
    let make = || -> Vec<ClientHandle> {
        (0..5)
            .map(|k| {
                client(
                    "f",
                    &format!("t{k}"),
                    40,
                    0.1 * k as f64,
                    k as u64,
                    train_config(k as u64),
                )
            })
            .collect()
    };
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap();
        pool.install(|| run_round(&global, &mut make(), &fed, 1).unwrap().0)
    };
    assert_eq!(run(1).values, run(4).values);
}

#[test]
fn empty_clients_are_excluded() {
    let cfg = tiny_model();
    let global = init_model(&cfg, 1).unwrap();
    let id = TurbineId::new("f", "empty");
    let empty =
        ClientHandle::new(dataset(&id, vec![]), dataset(&id, vec![]), train_config(0)).unwrap();
    let full = client("f", "full", 30, 0.0, 1, train_config(1));
    let (next, round) = run_round(
        &global,
        &mut [empty.clone(), full.clone()],
        &FederationConfig::default(),
        1,
    )
    .unwrap();
    assert_eq!(round.excluded, vec![id]);
    assert_eq!(round.clients.len(), 1);
    assert_eq!(
        next.values,
        full.clone()
            .local_update(&global, 1, None)
            .unwrap()
            .params
            .values
    );

    let err = run_round(&global, &mut [empty], &FederationConfig::default(), 1).unwrap_err();
    assert!(matches!(err, fednbm::Error::Contract(_)));
}

#[test]
fn strong_proximal_term_keeps_update_near_anchor() {
    let cfg = tiny_model();
    let global = init_model(&cfg, 2).unwrap();
    let make = || {
        vec![
            client("f", "a", 200, 0.5, 1, train_config(1)),
            client("f", "b", 200, -0.5, 2, train_config(2)),
        ]
    };
    let avg = FederationConfig::default();
    let prox = FederationConfig {
        algorithm: Algorithm::FedProx { mu: 1e6 },
        ..Default::default()
    };
    let (g_avg, _) = run_round(&global, &mut make(), &avg, 1).unwrap();
    let (g_prox, _) = run_round(&global, &mut make(), &prox, 1).unwrap();
    let d_avg = params_distance(&g_avg, &global).unwrap();
    let d_prox = params_distance(&g_prox, &global).unwrap();
    assert!(d_prox < d_avg, "fedprox moved {d_prox}, fedavg {d_avg}");
}

#[test]
fn two_constant_targets_converge_to_midpoint() {
    let cfg = tiny_model();
    let shared = samples(128, cfg.window_len, 0.0, 4);
    let with_target = |t: f64| -> Vec<_> {
        shared
            .iter()
            .map(|s| {
                let mut s = s.clone();
                s.target = t;
                s
            })
            .collect()
    };
    let train = TrainConfig {
        // Adam's normalized steps cancel between symmetric clients anywhere
        // between the two targets; the fixed point argument needs plain gradients
        optimizer: Optimizer::Sgd,
        learning_rate: 0.05,
        batch_size: 20,
        ..train_config(0)
    };
    let mk = |name: &str, t: f64, seed: u64| {
        let id = TurbineId::new("f", name);
        let s = with_target(t);
        ClientHandle::new(
            dataset(&id, s[..100].to_vec()),
            dataset(&id, s[100..].to_vec()),
            TrainConfig {
                seed,
                ..train.clone()
            },
        )
        .unwrap()
    };
    let (a, b) = (1.0, 2.0);
    let mut clients = vec![mk("a", a, 1), mk("b", b, 2)];
    let fed = FederationConfig {
        rounds: 50,
        ..Default::default()
    };
    let result = run_federation(&mut clients, &cfg, &fed).unwrap();
    let probe = dataset(&TurbineId::new("f", "probe"), shared);
    for p in predict(&result.global, &probe).unwrap() {
        assert!((p - (a + b) / 2.0).abs() < 0.1, "prediction {p}");
    }
}

#[test]
fn fine_tune_with_zero_epochs_returns_global() {
    let cfg = tiny_model();
    let global = init_model(&cfg, 4).unwrap();
    let c = client("f", "t", 40, 0.0, 1, train_config(1));
    let ft = FineTuneConfig {
        max_epochs: 0,
        ..Default::default()
    };
    let (p, report) = fine_tune(&global, &c, &ft).unwrap();
    assert_eq!(p.values, global.values);
    assert_eq!(report.epochs_run, 0);

    let id = TurbineId::new("f", "e");
    let empty =
        ClientHandle::new(dataset(&id, vec![]), dataset(&id, vec![]), train_config(0)).unwrap();
    assert!(fine_tune(&global, &empty, &FineTuneConfig::default()).is_err());
}

#[test]
fn fine_tuning_helps_an_offset_client() {
    let cfg = tiny_model();
    let mut wins = 0;
    for seed in 0..5u64 {
        let mut clients = vec![
            client("f", "a", 200, 0.0, seed * 10 + 1, train_config(seed + 1)),
            client("f", "b", 200, 0.0, seed * 10 + 2, train_config(seed + 2)),
            client("f", "odd", 200, 1.0, seed * 10 + 3, train_config(seed + 3)),
        ];
        let fed = FederationConfig {
            rounds: 10,
            init_seed: seed,
            ..Default::default()
        };
        let global = run_federation(&mut clients, &cfg, &fed).unwrap().global;
        let odd = &clients[2];
        let ft = FineTuneConfig {
            learning_rate: 1e-3,
            ..Default::default()
        };
        let (tuned, _) = fine_tune(&global, odd, &ft).unwrap();
        let before = evaluate_mae(&global, odd.val_set()).unwrap();
        let after = evaluate_mae(&tuned, odd.val_set()).unwrap();
        if after <= before {
            wins += 1;
        }
    }
    assert!(wins >= 4, "fine-tuning helped in {wins} of 5 seeds");
}

fn fleet(farms: &[(&str, usize)]) -> BTreeMap<String, Vec<ClientHandle>> {
    farms
        .iter()
        .enumerate()
        .map(|(f, &(farm, n))| {
            let clients = (0..n)
                .map(|t| {
                    client(
                        farm,
                        &format!("t{t}"),
                        30,
                        f as f64,
                        (f * 10 + t) as u64,
                        train_config(t as u64),
                    )
                })
                .collect();
            (farm.to_string(), clients)
        })
        .collect()
}

#[test]
fn strategy_topology() {
    let cfg = tiny_model();
    let fed = FederationConfig {
        rounds: 2,
        ..Default::default()
    };
    let farms = fleet(&[("x", 2), ("y", 2)]);
    let intra = run_strategy(
        &StrategySpec::new(StrategyKind::IntraFarm, false),
        &farms,
        &cfg,
        &fed,
    )
    .unwrap();
    assert_eq!(intra.federations.len(), 2);
    assert!(intra
        .federations
        .iter()
        .all(|f| f.members.len() == 2 && f.rounds.len() == 2));
    let inter = run_strategy(
        &StrategySpec::new(StrategyKind::InterFarm, false),
        &farms,
        &cfg,
        &fed,
    )
    .unwrap();
    assert_eq!(inter.federations.len(), 1);
    assert_eq!(inter.federations[0].members.len(), 4);
    let local = run_strategy(
        &StrategySpec::new(StrategyKind::Local, true),
        &farms,
        &cfg,
        &fed,
    )
    .unwrap();
    assert!(local.federations.is_empty());
    assert_eq!(local.fine_tuned.as_ref().unwrap().len(), 4);

    // every member of a federation receives the same global model
    let x0 = intra.deliverable(&TurbineId::new("x", "t0")).unwrap();
    let x1 = intra.deliverable(&TurbineId::new("x", "t1")).unwrap();
    let y0 = intra.deliverable(&TurbineId::new("y", "t0")).unwrap();
    assert_eq!(x0.values, x1.values);
    assert_ne!(x0.values, y0.values);
}

#[test]
fn single_turbine_collapses_every_strategy() {
    let cfg = tiny_model();
    let fed = FederationConfig {
        rounds: 3,
        ..Default::default()
    };
    let farms = fleet(&[("solo", 1)]);
    let id = TurbineId::new("solo", "t0");
    let models: Vec<Vec<f64>> = StrategyKind::ALL
        .iter()
        .map(|&k| {
            run_strategy(&StrategySpec::new(k, false), &farms, &cfg, &fed)
                .unwrap()
                .deliverable(&id)
                .unwrap()
                .values
                .clone()
        })
        .collect();
    assert_eq!(models[0], models[1]);
    assert_eq!(models[1], models[2]);
}

#[test]
fn strategy_rejects_malformed_fleets() {
    let cfg = tiny_model();
    let fed = FederationConfig::default();
    let spec = StrategySpec::new(StrategyKind::Local, false);
    assert!(run_strategy(&spec, &BTreeMap::new(), &cfg, &fed).is_err());
    let mut farms = fleet(&[("x", 1)]);
    farms.insert("y".into(), fleet(&[("x", 1)]).remove("x").unwrap());
    assert!(matches!(
        run_strategy(&spec, &farms, &cfg, &fed),
        Err(fednbm::Error::Contract(_))
    ));
}

/// The engine only ever sees parameters and counts: a client with no data
/// structures at all can take part.
struct Scripted {
    id: TurbineId,
    n: usize,
    shift: f64,
}

impl FederatedClient for Scripted {
    fn id(&self) -> &TurbineId {
        &self.id
    }

    fn sample_count(&self) -> usize {
        self.n
    }

    fn local_update(
        &mut self,
        global: &ModelParameters,
        _: usize,
        _: Option<f64>,
    ) -> fednbm::Result<LocalUpdate> {
        let params = global.with_values(global.values.iter().map(|v| v + self.shift).collect())?;
        Ok(LocalUpdate {
            params,
            sample_count: self.n,
            train_loss: 0.0,
            val_loss: None,
        })
    }
}

#[test]
fn engine_accepts_any_client_exposing_parameters_and_counts() {
    let cfg: ModelConfig = tiny_model();
    let mut clients = vec![
        Scripted {
            id: TurbineId::new("f", "a"),
            n: 1,
            shift: 4.0,
        },
        Scripted {
            id: TurbineId::new("f", "b"),
            n: 3,
            shift: 0.0,
        },
    ];
    let fed = FederationConfig {
        rounds: 2,
        ..Default::default()
    };
    let start = init_model(&cfg, fed.init_seed).unwrap();
    let result = run_federation(&mut clients, &cfg, &fed).unwrap();
    for (a, b) in result.global.values.iter().zip(&start.values) {
        assert!((a - b - 2.0).abs() < 1e-12);
    }
    let mut log = Vec::new();
    write_round_log(&mut log, "demo", &result.rounds).unwrap();
    let text = String::from_utf8(log).unwrap();
    assert_eq!(text.lines().count(), 2);
    let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    assert_eq!(first["federation"], "demo");
    assert_eq!(first["clients"][0]["weight"], 0.25);
}
