//! Discounted-UCB scoring of (client, model) pairs.
//!
//! The server records one local training loss per trained pair per round.
//! For client `k` and model `i` at round `t` the score is
//!
//! ```text
//! A_t(k,i) = p_k(i) * (L_t(k,i) / N_t(k,i) + U_t(k,i))
//! L_t(k,i) = sum_{n<t} gamma^{t-1-n} 1{(k,i) trained at n} l_n(k,i)
//! N_t(k,i) = sum_{n<t} gamma^{t-1-n} 1{(k,i) trained at n}
//! U_t(k,i) = sqrt(2 * ln(sum_{n<t} gamma^{t-1-n}) / N_t(k,i))
//! ```
//!
//! where `p_k(i)` is the client's share of model-`i` training data. `L` and
//! `N` count only rounds in which client `k` actually trained model `i`; a
//! client trains at most one model per round, so counting every selection of
//! `k` would divide model-`i` losses by selections that produced no model-`i`
//! observation. The exploration numerator counts all rounds, selected or
//! not.
//!
//! The production path evaluates `L` and `N` with the per-round recursion
//! `L_{n+1} = gamma * L_n + l_n`; tests hold it against the literal
//! power-series summation.

use crate::error::{Error, Result};

/// Per-(client, model) record of observed losses and the rounds they were
/// observed in. Single writer (the server loop); reads are pure.
#[derive(Debug, Clone, PartialEq)]
pub struct LossHistory {
    gamma: f64,
    num_clients: usize,
    num_models: usize,
    /// `entries[client][model]` = (round, loss) pairs, rounds strictly
    /// increasing.
    entries: Vec<Vec<Vec<(u64, f64)>>>,
}

impl LossHistory {
    pub fn new(num_clients: usize, num_models: usize, gamma: f64) -> Result<Self> {
        if num_clients < 1 || num_models < 1 {
            return Err(Error::invalid(
                "loss history",
                "need at least one client and one model",
            ));
        }
        if !(gamma > 0.0 && gamma <= 1.0) {
            return Err(Error::invalid(
                "loss history",
                format!("gamma {gamma} must lie in (0, 1]"),
            ));
        }
        Ok(Self {
            gamma,
            num_clients,
            num_models,
            entries: vec![vec![Vec::new(); num_models]; num_clients],
        })
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn num_clients(&self) -> usize {
        self.num_clients
    }

    pub fn num_models(&self) -> usize {
        self.num_models
    }

    pub fn entries(&self, client: usize, model: usize) -> &[(u64, f64)] {
        &self.entries[client][model]
    }

    pub fn total_entries(&self) -> usize {
        self.entries
            .iter()
            .flat_map(|per_model| per_model.iter())
            .map(Vec::len)
            .sum()
    }

    fn check_pair(&self, client: usize, model: usize) -> Result<()> {
        if client >= self.num_clients || model >= self.num_models {
            return Err(Error::invalid(
                "history index",
                format!(
                    "client {client}, model {model} out of range {}x{}",
                    self.num_clients, self.num_models
                ),
            ));
        }
        Ok(())
    }

    /// Discounted loss sum `L_t` and count `N_t` for one pair, evaluated by
    /// the production recursion. `None` when the pair has no observation
    /// before `t`.
    pub fn discounted(&self, t: u64, client: usize, model: usize) -> Result<Option<(f64, f64)>> {
        self.check_pair(client, model)?;
        Ok(discounted_sums(self.entries(client, model), t, self.gamma))
    }

    /// Appends the loss observed for `(client, model)` at `round`. Rounds
    /// must arrive in increasing order per pair; a second entry for the same
    /// round is an error.
    pub fn record(&mut self, round: u64, client: usize, model: usize, loss: f64) -> Result<()> {
        self.check_pair(client, model)?;
        if !loss.is_finite() || loss < 0.0 {
            return Err(Error::invalid(
                "loss",
                format!("loss {loss} must be finite and >= 0"),
            ));
        }
        let list = &mut self.entries[client][model];
        if let Some(&(last, _)) = list.last() {
            if last == round {
                return Err(Error::DuplicateEntry {
                    client,
                    model,
                    round,
                });
            }
            if last > round {
                return Err(Error::invalid(
                    "loss record",
                    format!("round {round} arrived after round {last} for client {client}, model {model}"),
                ));
            }
        }
        list.push((round, loss));
        Ok(())
    }
}

/// Discounted loss sum `L_t` and count `N_t` for one pair, evaluated by the
/// per-round recursion. `None` when the pair has no observation before `t`.
fn discounted_sums(entries: &[(u64, f64)], t: u64, gamma: f64) -> Option<(f64, f64)> {
    let mut next = entries.iter().peekable();
    let mut l = 0.0;
    let mut n = 0.0;
    let mut seen = false;
    for round in 0..t {
        l *= gamma;
        n *= gamma;
        if let Some(&&(r, loss)) = next.peek() {
            if r == round {
                l += loss;
                n += 1.0;
                seen = true;
                next.next();
            }
        }
    }
    seen.then_some((l, n))
}

/// The exploration numerator `sum_{n=0}^{t-1} gamma^{t-1-n}`, by the same
/// recursion.
fn discount_total(t: u64, gamma: f64) -> f64 {
    let mut d = 0.0;
    for _ in 0..t {
        d = gamma * d + 1.0;
    }
    d
}

/// The UCB index `A_t(k, i)` for one pair. `p` is the client's share of the
/// model's training data and must lie in (0, 1].
pub fn ucb_index(
    history: &LossHistory,
    t: u64,
    client: usize,
    model: usize,
    p: f64,
) -> Result<f64> {
    history.check_pair(client, model)?;
    if t == 0 {
        return Err(Error::invalid("round", "UCB index is undefined at t = 0"));
    }
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::invalid(
            "proportion",
            format!("p {p} must lie in (0, 1]"),
        ));
    }
    let gamma = history.gamma;
    let (l, n) =
        discounted_sums(history.entries(client, model), t, gamma).ok_or(Error::MissingHistory {
            client,
            model,
            round: t,
        })?;
    let total = discount_total(t, gamma);
    let bonus = (2.0 * total.ln() / n).sqrt();
    Ok(p * (l / n + bonus))
}

/// The M-dimensional score vector of one client.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreVector {
    pub client: usize,
    pub values: Vec<f64>,
}

/// Scores every (client, model) pair at round `t`. `proportions` is indexed
/// `[client][model]`. Errors if any pair has no observation before `t`,
/// i.e. warm-up has not covered it yet.
pub fn score_all(
    history: &LossHistory,
    t: u64,
    proportions: &[Vec<f64>],
) -> Result<Vec<ScoreVector>> {
    if proportions.len() != history.num_clients {
        return Err(Error::ShapeMismatch(format!(
            "proportions cover {} clients, history has {}",
            proportions.len(),
            history.num_clients
        )));
    }
    (0..history.num_clients)
        .map(|client| {
            if proportions[client].len() != history.num_models {
                return Err(Error::ShapeMismatch(format!(
                    "client {client}: proportions cover {} models, history has {}",
                    proportions[client].len(),
                    history.num_models
                )));
            }
            let values = (0..history.num_models)
                .map(|model| ucb_index(history, t, client, model, proportions[client][model]))
                .collect::<Result<Vec<f64>>>()?;
            Ok(ScoreVector { client, values })
        })
        .collect()
}
