//! Server orchestration: the per-round training loop.
//!
//! Each round the active policy picks clients and assigns each one a model;
//! the selected clients train their assigned model's current global weights
//! on their local data (in parallel — results are consumed in plan order, so
//! determinism never depends on completion order); observed losses go into
//! the loss history; and every model that received updates is replaced by a
//! data-share-weighted average of them. Models nobody trained keep their
//! previous weights bit-for-bit.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::datagen::{self, FederatedDataset, ModelSpec};
use crate::error::{Error, Result};
use crate::expio::{ExperimentConfig, MetricsLog, MetricsRow};
use crate::learner::{self, ModelWeights, TrainConfig};
use crate::policies::{self, RoundPlan};
use crate::scoring::{self, LossHistory};
use crate::seed::{mix, stream};

/// Client selection policy run by the server.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Policy {
    MultiFedAvg,
    RanklistMultiUcb,
    ParetoMultiUcb,
    /// Baseline: each model trained in its own single-model FedAvg run with
    /// half the clients per round.
    SingleFedAvg,
}

impl Policy {
    pub const ALL: [Policy; 4] = [
        Policy::MultiFedAvg,
        Policy::RanklistMultiUcb,
        Policy::ParetoMultiUcb,
        Policy::SingleFedAvg,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Policy::MultiFedAvg => "multi_fedavg",
            Policy::RanklistMultiUcb => "ranklist_multi_ucb",
            Policy::ParetoMultiUcb => "pareto_multi_ucb",
            Policy::SingleFedAvg => "single_fedavg",
        }
    }

    pub fn from_name(name: &str) -> Result<Policy> {
        Policy::ALL
            .into_iter()
            .find(|p| p.name() == name)
            .ok_or_else(|| {
                Error::invalid(
                    "policy",
                    format!(
                        "unknown policy `{name}`; expected one of {}",
                        Policy::ALL.map(|p| p.name()).join(", ")
                    ),
                )
            })
    }

    /// Stable index used when mixing grid-cell seeds.
    pub fn index(self) -> u64 {
        match self {
            Policy::MultiFedAvg => 0,
            Policy::RanklistMultiUcb => 1,
            Policy::ParetoMultiUcb => 2,
            Policy::SingleFedAvg => 3,
        }
    }

    /// Whether the policy consumes UCB scores (and therefore needs warm-up).
    pub fn uses_scores(self) -> bool {
        matches!(self, Policy::RanklistMultiUcb | Policy::ParetoMultiUcb)
    }
}

impl std::fmt::Display for Policy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Everything the server carries between rounds.
#[derive(Debug, Clone)]
pub struct GlobalState {
    /// One global model per task, zero-initialized.
    pub models: Vec<ModelWeights>,
    pub history: LossHistory,
    pub round: u64,
    pub policy: Policy,
    rng: ChaCha8Rng,
    train_seed: u64,
}

impl GlobalState {
    pub fn new(
        model_specs: &[ModelSpec],
        num_clients: usize,
        policy: Policy,
        gamma: f64,
        policy_seed: u64,
        train_seed: u64,
    ) -> Result<Self> {
        if model_specs.is_empty() {
            return Err(Error::Empty("model spec"));
        }
        Ok(Self {
            models: model_specs
                .iter()
                .map(|m| ModelWeights::zeros(m.num_classes, m.dim))
                .collect(),
            history: LossHistory::new(num_clients, model_specs.len(), gamma)?,
            round: 0,
            policy,
            rng: ChaCha8Rng::seed_from_u64(policy_seed),
            train_seed,
        })
    }
}

/// One client's contribution to a round.
#[derive(Debug, Clone)]
pub struct ClientUpdate {
    pub client: usize,
    pub model: usize,
    pub weights: ModelWeights,
    pub loss: f64,
}

/// Outcome of one executed round.
#[derive(Debug, Clone)]
pub struct RoundResult {
    pub plan: RoundPlan,
    /// In plan order.
    pub updates: Vec<ClientUpdate>,
    pub model_updated: Vec<bool>,
    pub warmup: bool,
}

/// Shuffle seed for one client's local training in one round.
pub fn client_train_seed(train_seed: u64, round: u64, client: usize) -> u64 {
    mix(train_seed, &[round, client as u64])
}

/// Data-share-weighted average of client updates for one model, or
/// `previous` unchanged when no client trained it. Computed as an
/// incremental weighted mean over updates in ascending client id, which
/// keeps the result exact for a single contributor and for unanimous
/// contributors, and fixes the floating-point summation order.
pub fn aggregate(
    updates: &[(usize, &ModelWeights, f64)],
    previous: &ModelWeights,
) -> Result<ModelWeights> {
    if updates.is_empty() {
        return Ok(previous.clone());
    }
    let mut order: Vec<usize> = (0..updates.len()).collect();
    order.sort_by_key(|&i| updates[i].0);
    for pair in order.windows(2) {
        if updates[pair[0]].0 == updates[pair[1]].0 {
            return Err(Error::invalid(
                "aggregation",
                format!("client {} contributed twice", updates[pair[0]].0),
            ));
        }
    }

    let mut result: Option<ModelWeights> = None;
    let mut share_sum = 0.0;
    for &i in &order {
        let (client, weights, share) = updates[i];
        if !weights.is_finite() {
            return Err(Error::invalid(
                "aggregation",
                format!("client {client} returned non-finite weights"),
            ));
        }
        if !(share > 0.0 && share.is_finite()) {
            return Err(Error::invalid(
                "aggregation",
                format!("client {client}: share {share} must be finite and > 0"),
            ));
        }
        if weights.matrix.dim() != previous.matrix.dim() {
            return Err(Error::ShapeMismatch(format!(
                "client {client}: update shape {:?} != {:?}",
                weights.matrix.dim(),
                previous.matrix.dim()
            )));
        }
        share_sum += share;
        match result.as_mut() {
            None => result = Some(weights.clone()),
            Some(acc) => {
                let step = share / share_sum;
                ndarray::Zip::from(&mut acc.matrix)
                    .and(&weights.matrix)
                    .for_each(|a, &b| *a += step * (b - *a));
                ndarray::Zip::from(&mut acc.bias)
                    .and(&weights.bias)
                    .for_each(|a, &b| *a += step * (b - *a));
            }
        }
    }
    Ok(result.expect("updates non-empty"))
}

/// Executes one full round: plan, parallel local training, loss recording,
/// per-model aggregation, round increment.
pub fn run_round(
    state: &mut GlobalState,
    data: &FederatedDataset,
    k: usize,
    train: &TrainConfig,
) -> Result<RoundResult> {
    let num_clients = data.num_clients();
    let num_models = data.num_models();
    let (plan, warmup) = match state.policy {
        Policy::MultiFedAvg | Policy::SingleFedAvg => (
            policies::multi_fedavg(num_clients, k, num_models, &mut state.rng)?,
            false,
        ),
        Policy::RanklistMultiUcb | Policy::ParetoMultiUcb => {
            match policies::warmup_plan(num_clients, k, num_models, state.round)? {
                Some(plan) => (plan, true),
                None => {
                    let scores =
                        scoring::score_all(&state.history, state.round, data.train_shares())?;
                    let plan = match state.policy {
                        Policy::RanklistMultiUcb => {
                            policies::ranklist_select(&scores, k, state.round, num_models)?
                        }
                        _ => policies::pareto_select(&scores, k, num_models, &mut state.rng)?,
                    };
                    (plan, false)
                }
            }
        }
    };

    let round = state.round;
    let train_seed = state.train_seed;
    let jobs: Vec<(usize, usize)> = plan.pairs().collect();
    let updates: Vec<ClientUpdate> = {
        let models = &state.models;
        jobs.into_par_iter()
            .map(|(client, model)| {
                let cfg = TrainConfig {
                    seed: client_train_seed(train_seed, round, client),
                    ..train.clone()
                };
                let (weights, loss) =
                    learner::local_train(&models[model], data.train(client, model), &cfg)?;
                Ok(ClientUpdate {
                    client,
                    model,
                    weights,
                    loss,
                })
            })
            .collect::<Result<Vec<_>>>()?
    };

    for update in &updates {
        state
            .history
            .record(round, update.client, update.model, update.loss)?;
    }

    let mut model_updated = vec![false; num_models];
    for (model, updated) in model_updated.iter_mut().enumerate() {
        let contributions: Vec<(usize, &ModelWeights, f64)> = updates
            .iter()
            .filter(|u| u.model == model)
            .map(|u| (u.client, &u.weights, data.train_share(u.client, model)))
            .collect();
        if !contributions.is_empty() {
            state.models[model] = aggregate(&contributions, &state.models[model])?;
            *updated = true;
        }
    }

    state.round += 1;
    Ok(RoundResult {
        plan,
        updates,
        model_updated,
        warmup,
    })
}

/// Per-model weighted average test accuracy: each client's accuracy counts
/// in proportion to its local test-set size.
pub fn evaluate(models: &[ModelWeights], data: &FederatedDataset) -> Result<Vec<f64>> {
    if models.len() != data.num_models() {
        return Err(Error::ShapeMismatch(format!(
            "{} models for a {}-model dataset",
            models.len(),
            data.num_models()
        )));
    }
    (0..data.num_models())
        .map(|model| {
            let total: usize = (0..data.num_clients())
                .map(|client| data.test(client, model).len())
                .sum();
            let mut weighted = 0.0;
            for client in 0..data.num_clients() {
                let test = data.test(client, model);
                let weight = test.len() as f64 / total as f64;
                weighted += weight * learner::accuracy(&models[model], test)?;
            }
            Ok(weighted)
        })
        .collect()
}

/// Runs a full experiment: dataset generation, `total_rounds` rounds under
/// the configured policy, evaluation at round 0 and every `eval_every`
/// rounds thereafter. In baseline mode each model is trained in its own
/// single-model FedAvg run with `max(1, K/2)` clients per round, and the
/// per-model logs are merged.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<MetricsLog> {
    cfg.validate()?;
    let dataset = datagen::generate(&cfg.synthetic_spec())?;
    let mut rows = match cfg.effective_policy() {
        Policy::SingleFedAvg => {
            let k = (cfg.clients_per_round / 2).max(1);
            let mut rows = Vec::new();
            for model in 0..dataset.num_models() {
                let view = dataset.single_model_view(model)?;
                let policy_seed = mix(
                    cfg.master_seed,
                    &[stream::BASELINE, stream::POLICY, model as u64],
                );
                let train_seed = mix(
                    cfg.master_seed,
                    &[stream::BASELINE, stream::TRAIN, model as u64],
                );
                rows.extend(run_loop(
                    &view,
                    Policy::SingleFedAvg,
                    k,
                    cfg,
                    policy_seed,
                    train_seed,
                    &[model],
                )?);
            }
            rows
        }
        policy => {
            let policy_seed = mix(cfg.master_seed, &[stream::POLICY]);
            let train_seed = mix(cfg.master_seed, &[stream::TRAIN]);
            let labels: Vec<usize> = (0..dataset.num_models()).collect();
            run_loop(
                &dataset,
                policy,
                cfg.clients_per_round,
                cfg,
                policy_seed,
                train_seed,
                &labels,
            )?
        }
    };
    rows.sort_by_key(|r| (r.round, r.model));
    Ok(MetricsLog { rows })
}

/// The round loop shared by the multi-model path and each baseline sub-run.
/// `model_labels` maps the dataset's model indices to the ids reported in
/// the log (a baseline sub-run sees a single-model view of model `i`).
fn run_loop(
    data: &FederatedDataset,
    policy: Policy,
    k: usize,
    cfg: &ExperimentConfig,
    policy_seed: u64,
    train_seed: u64,
    model_labels: &[usize],
) -> Result<Vec<MetricsRow>> {
    let mut state = GlobalState::new(
        data.model_specs(),
        data.num_clients(),
        policy,
        cfg.gamma,
        policy_seed,
        train_seed,
    )?;
    let train = cfg.train_config();
    let num_models = data.num_models();

    let mut rows = Vec::new();
    let emit = |rows: &mut Vec<MetricsRow>,
                round: u64,
                acc: &[f64],
                loss_sum: &[f64],
                count: &[u64],
                warmup: bool| {
        for model in 0..num_models {
            let mean_train_loss = if count[model] > 0 {
                loss_sum[model] / count[model] as f64
            } else {
                f64::NAN
            };
            rows.push(MetricsRow {
                round,
                model: model_labels[model],
                policy: policy.name().to_string(),
                weighted_accuracy: acc[model],
                mean_train_loss,
                num_selected: count[model],
                warmup,
            });
        }
    };

    let acc0 = evaluate(&state.models, data)?;
    emit(
        &mut rows,
        0,
        &acc0,
        &vec![0.0; num_models],
        &vec![0; num_models],
        false,
    );

    let mut loss_sum = vec![0.0; num_models];
    let mut count = vec![0u64; num_models];
    let mut saw_warmup = false;
    for t in 0..cfg.total_rounds {
        let result = run_round(&mut state, data, k, &train)?;
        saw_warmup |= result.warmup;
        for update in &result.updates {
            loss_sum[update.model] += update.loss;
            count[update.model] += 1;
        }
        if (t + 1) % cfg.eval_every == 0 {
            let acc = evaluate(&state.models, data)?;
            emit(&mut rows, t + 1, &acc, &loss_sum, &count, saw_warmup);
            loss_sum.iter_mut().for_each(|v| *v = 0.0);
            count.iter_mut().for_each(|v| *v = 0);
            saw_warmup = false;
        }
    }
    Ok(rows)
}
