use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::aggregate::{naive_init, server_aggregate};
use super::client::{client_local_training, ClientState, STREAM_PERSONAL};
use super::personal::personal_aggregation;
use super::RunConfig;
use crate::data::{make_batch, ClientSplit, DataConfig, MultimodalSample};
use crate::error::{Error, Result};
use crate::metrics::{ConfusionMatrix, Metrics};
use crate::model::{ModelArch, ModelParams};
use crate::seed::derive_seed;

const STREAM_INIT: u64 = 10;
const STREAM_CLIENT: u64 = 11;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub clients: Vec<Metrics>,
    pub mean: Metrics,
    /// Smallest and largest personalized weight over all clients.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub weight_range: Option<[f64; 2]>,
}

/// The reproducible part of a report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportBody {
    pub method: String,
    pub seed: u64,
    pub config: RunConfig,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub data: Option<DataConfig>,
    pub num_clients: usize,
    pub rounds: Vec<RoundRecord>,
    pub final_metrics: Metrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    #[serde(flatten)]
    pub body: ReportBody,
    pub wall_time_secs: f64,
}

impl RunReport {
    pub fn final_metrics(&self) -> Metrics {
        self.body.final_metrics
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Report without timing; identical across repeated runs of one seed.
    pub fn body_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.body)?)
    }
}

/// Final state of a run: the report plus the trained parameters.
#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub report: RunReport,
    pub global: ModelParams,
    pub clients: Vec<ClientState>,
}

impl RunOutcome {
    /// Parameters scored on client `i`'s test set.
    pub fn eval_params<'a>(&'a self, cfg: &RunConfig, i: usize) -> &'a ModelParams {
        if cfg.evaluates_local() {
            &self.clients[i].local
        } else {
            &self.global
        }
    }
}

pub fn evaluate(arch: &ModelArch, params: &ModelParams, samples: &[MultimodalSample]) -> Result<Metrics> {
    let refs: Vec<&MultimodalSample> = samples.iter().collect();
    let batch = make_batch(&refs)?;
    let truth = batch
        .labels
        .ok_or_else(|| Error::Data("test set has unlabeled samples".into()))?;
    let pred = arch.predict(params, &batch.inputs)?;
    Metrics::from_confusion(&ConfusionMatrix::from_predictions(&truth, &pred, arch.num_classes())?)
}

fn client_round(
    arch: &ModelArch,
    cfg: &RunConfig,
    global: &ModelParams,
    client: &mut ClientState,
    round: usize,
) -> Result<()> {
    let init = if cfg.method.uses_personal_aggregation() {
        if cfg.reinit_weights {
            client.weights.fill(1.0);
        }
        let mut rng = client.rng(round, STREAM_PERSONAL);
        let (init, w) = personal_aggregation(
            arch,
            global,
            &client.local,
            client.weights.clone(),
            &client.split.labeled,
            cfg.lr_w,
            cfg.w_passes,
            cfg.batch_size,
            &mut rng,
        )?;
        client.weights = w;
        init
    } else {
        naive_init(global)
    };
    let local = client_local_training(arch, client, init, cfg, round)?;
    if let Some(name) = local.first_non_finite() {
        return Err(Error::NumericAbort {
            round,
            client: client.id,
            tensor: name.to_string(),
        });
    }
    client.local = local;
    Ok(())
}

/// Runs `cfg.rounds` rounds from `global` with the given clients.
pub fn run_clients(
    cfg: &RunConfig,
    arch: &ModelArch,
    mut global: ModelParams,
    mut clients: Vec<ClientState>,
) -> Result<RunOutcome> {
    cfg.validate()?;
    if clients.is_empty() {
        return Err(Error::Config("need at least one client".into()));
    }
    let start = Instant::now();
    let mut rounds = Vec::with_capacity(cfg.rounds);
    for round in 1..=cfg.rounds {
        let step = |c: &mut ClientState| client_round(arch, cfg, &global, c, round);
        let results: Vec<Result<()>> = if cfg.parallel_clients {
            clients.par_iter_mut().map(step).collect()
        } else {
            clients.iter_mut().map(step).collect()
        };
        results.into_iter().collect::<Result<Vec<()>>>()?;

        let locals: Vec<&ModelParams> = clients.iter().map(|c| &c.local).collect();
        global = server_aggregate(&locals)?;

        let per_client = clients
            .iter()
            .map(|c| {
                let params = if cfg.evaluates_local() { &c.local } else { &global };
                evaluate(arch, params, &c.split.test)
            })
            .collect::<Result<Vec<_>>>()?;
        let weight_range = cfg.method.uses_personal_aggregation().then(|| {
            clients.iter().map(|c| c.weights.range()).fold(
                [f64::INFINITY, f64::NEG_INFINITY],
                |[lo, hi], (a, b)| [lo.min(a), hi.max(b)],
            )
        });
        let mean = Metrics::mean(&per_client);
        log::debug!(
            "{} round {round}: oa {:.4} ba {:.4} f1 {:.4}",
            cfg.method,
            mean.oa,
            mean.ba,
            mean.f1
        );
        rounds.push(RoundRecord {
            round,
            clients: per_client,
            mean,
            weight_range,
        });
    }
    let final_metrics = rounds.last().map(|r| r.mean).unwrap_or_default();
    let report = RunReport {
        body: ReportBody {
            method: cfg.method.to_string(),
            seed: cfg.seed,
            config: cfg.clone(),
            data: None,
            num_clients: clients.len(),
            rounds,
            final_metrics,
        },
        wall_time_secs: start.elapsed().as_secs_f64(),
    };
    Ok(RunOutcome {
        report,
        global,
        clients,
    })
}

/// Initializes the global model and one client per split from `cfg.seed`,
/// then runs every round.
pub fn run_experiment(cfg: &RunConfig, arch: &ModelArch, splits: Vec<ClientSplit>) -> Result<RunOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[STREAM_INIT]));
    let global = arch.init(&mut rng);
    let clients = splits
        .into_iter()
        .enumerate()
        .map(|(i, s)| {
            ClientState::new(i, &global, s, derive_seed(cfg.seed, &[STREAM_CLIENT, i as u64]))
        })
        .collect();
    run_clients(cfg, arch, global, clients)
}
