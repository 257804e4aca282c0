//! Client selection and model assignment policies.
//!
//! Three ways to pick the round's clients and hand each one a model:
//!
//! * [`multi_fedavg`] — K clients uniformly at random, each assigned a
//!   uniformly random model.
//! * [`ranklist_select`] — per-model rank lists by UCB score, drained
//!   round-robin starting at a model that rotates with the round number.
//! * [`pareto_select`] — the Pareto front of the score vectors, sampled
//!   down to K when it is larger; each selected client gets the model in
//!   whose rank list it places best.
//!
//! The UCB policies need every (client, model) pair observed once before
//! scores exist; [`warmup_plan`] provides that deterministic schedule.

use rand::Rng;
use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::scoring::ScoreVector;

/// The set of clients selected for one round and the model assigned to each.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RoundPlan {
    /// Clients in selection order.
    selected: Vec<usize>,
    assignment: BTreeMap<usize, usize>,
}

impl RoundPlan {
    /// Builds a plan from (client, model) pairs. Each client may appear at
    /// most once.
    pub fn new(pairs: Vec<(usize, usize)>) -> Result<Self> {
        let mut selected = Vec::with_capacity(pairs.len());
        let mut assignment = BTreeMap::new();
        for (client, model) in pairs {
            if assignment.insert(client, model).is_some() {
                return Err(Error::invalid(
                    "round plan",
                    format!("client {client} selected twice"),
                ));
            }
            selected.push(client);
        }
        Ok(Self {
            selected,
            assignment,
        })
    }

    pub fn selected(&self) -> &[usize] {
        &self.selected
    }

    pub fn model_for(&self, client: usize) -> Option<usize> {
        self.assignment.get(&client).copied()
    }

    /// (client, model) pairs in selection order.
    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.selected.iter().map(|&c| (c, self.assignment[&c]))
    }

    pub fn len(&self) -> usize {
        self.selected.len()
    }

    pub fn is_empty(&self) -> bool {
        self.selected.is_empty()
    }
}

fn check_k(num_clients: usize, k: usize) -> Result<()> {
    if k < 1 || k > num_clients {
        return Err(Error::invalid(
            "clients per round",
            format!("K = {k} must lie in 1..={num_clients}"),
        ));
    }
    Ok(())
}

/// FedAvg extended to multiple models: K distinct clients uniformly without
/// replacement, each assigned a model drawn uniformly and independently.
pub fn multi_fedavg<R: Rng>(
    num_clients: usize,
    k: usize,
    num_models: usize,
    rng: &mut R,
) -> Result<RoundPlan> {
    check_k(num_clients, k)?;
    if num_models < 1 {
        return Err(Error::invalid("policy", "need at least one model"));
    }
    let chosen = rand::seq::index::sample(rng, num_clients, k);
    let pairs = chosen
        .iter()
        .map(|client| (client, rng.random_range(0..num_models)))
        .collect();
    RoundPlan::new(pairs)
}

/// Per-model permutations of all clients, best score first. Ties break
/// toward the lower client id.
#[derive(Debug, Clone)]
pub struct RankLists {
    per_model: Vec<Vec<usize>>,
}

impl RankLists {
    pub fn build(scores: &[ScoreVector], num_models: usize) -> Result<Self> {
        validate_scores(scores, num_models)?;
        let per_model = (0..num_models)
            .map(|model| {
                let mut order: Vec<usize> = (0..scores.len()).collect();
                order.sort_by(|&a, &b| {
                    scores[b].values[model]
                        .total_cmp(&scores[a].values[model])
                        .then(a.cmp(&b))
                });
                order
            })
            .collect();
        Ok(Self { per_model })
    }

    /// Clients for one model, best first.
    pub fn list(&self, model: usize) -> &[usize] {
        &self.per_model[model]
    }

    /// 0-based position of `client` in `model`'s list.
    pub fn rank_of(&self, model: usize, client: usize) -> usize {
        self.per_model[model]
            .iter()
            .position(|&c| c == client)
            .expect("rank lists cover every client")
    }
}

fn validate_scores(scores: &[ScoreVector], num_models: usize) -> Result<()> {
    if scores.is_empty() {
        return Err(Error::Empty("score"));
    }
    for (idx, s) in scores.iter().enumerate() {
        if s.client != idx {
            return Err(Error::invalid(
                "scores",
                format!(
                    "expected client {idx} at position {idx}, found {}",
                    s.client
                ),
            ));
        }
        if s.values.len() != num_models {
            return Err(Error::ShapeMismatch(format!(
                "client {idx}: score vector has {} entries, expected {num_models}",
                s.values.len()
            )));
        }
    }
    Ok(())
}

/// Drains the per-model rank lists round-robin, starting from the model
/// indexed by the round number, taking the best not-yet-selected client each
/// time, until exactly K clients are picked. Fully deterministic.
pub fn ranklist_select(
    scores: &[ScoreVector],
    k: usize,
    round: u64,
    num_models: usize,
) -> Result<RoundPlan> {
    check_k(scores.len(), k)?;
    let ranks = RankLists::build(scores, num_models)?;
    let mut picked = vec![false; scores.len()];
    let mut pairs = Vec::with_capacity(k);
    let mut count = 0u64;
    while pairs.len() < k {
        let model = ((round + count) % num_models as u64) as usize;
        let client = ranks
            .list(model)
            .iter()
            .copied()
            .find(|&c| !picked[c])
            .expect("fewer than K clients picked, so one is free");
        picked[client] = true;
        pairs.push((client, model));
        count += 1;
    }
    RoundPlan::new(pairs)
}

fn dominates(a: &[f64], b: &[f64]) -> bool {
    let mut strictly = false;
    for (x, y) in a.iter().zip(b) {
        if x < y {
            return false;
        }
        if x > y {
            strictly = true;
        }
    }
    strictly
}

/// Clients whose score vectors no other client strictly dominates, in
/// ascending client id. Maintains a running front: each candidate is checked
/// against the front, and evicts any member it dominates. Never empty for
/// non-empty input.
pub fn pareto_front(scores: &[ScoreVector]) -> Result<Vec<usize>> {
    if scores.is_empty() {
        return Err(Error::Empty("score"));
    }
    let num_models = scores[0].values.len();
    validate_scores(scores, num_models)?;
    let mut front: Vec<usize> = Vec::new();
    for (candidate, s) in scores.iter().enumerate() {
        if front
            .iter()
            .any(|&m| dominates(&scores[m].values, &s.values))
        {
            continue;
        }
        front.retain(|&m| !dominates(&s.values, &scores[m].values));
        front.push(candidate);
    }
    front.sort_unstable();
    Ok(front)
}

/// Pareto-front client selection. If the front has at most K members they
/// are all selected (possibly fewer than K); otherwise K are sampled
/// uniformly without replacement. Each selected client is assigned the
/// model in whose rank list it places best, ties toward the lower model
/// index.
pub fn pareto_select<R: Rng>(
    scores: &[ScoreVector],
    k: usize,
    num_models: usize,
    rng: &mut R,
) -> Result<RoundPlan> {
    check_k(scores.len(), k)?;
    validate_scores(scores, num_models)?;
    let front = pareto_front(scores)?;
    let selected: Vec<usize> = if front.len() <= k {
        front
    } else {
        rand::seq::index::sample(rng, front.len(), k)
            .iter()
            .map(|i| front[i])
            .collect()
    };
    let ranks = RankLists::build(scores, num_models)?;
    let pairs = selected
        .into_iter()
        .map(|client| {
            let best = (0..num_models)
                .min_by_key(|&model| ranks.rank_of(model, client))
                .expect("at least one model");
            (client, best)
        })
        .collect();
    RoundPlan::new(pairs)
}

/// Number of rounds the warm-up schedule occupies.
pub fn warmup_rounds(num_clients: usize, num_models: usize, k: usize) -> u64 {
    let total = num_clients as u64 * num_models as u64;
    total.div_ceil(k as u64)
}

/// Deterministic warm-up: all (client, model) pairs enumerated model-major
/// (every client trains model 0, then model 1, ...), K pairs per round, each
/// pair exactly once. Returns `None` once all pairs are covered. K <= N
/// guarantees no client appears twice within one round.
pub fn warmup_plan(
    num_clients: usize,
    k: usize,
    num_models: usize,
    round: u64,
) -> Result<Option<RoundPlan>> {
    check_k(num_clients, k)?;
    if num_models < 1 {
        return Err(Error::invalid("policy", "need at least one model"));
    }
    let total = num_clients as u64 * num_models as u64;
    let start = round.saturating_mul(k as u64);
    if start >= total {
        return Ok(None);
    }
    let end = (start + k as u64).min(total);
    let pairs = (start..end)
        .map(|idx| {
            let client = (idx % num_clients as u64) as usize;
            let model = (idx / num_clients as u64) as usize;
            (client, model)
        })
        .collect();
    RoundPlan::new(pairs).map(Some)
}
