//! Deterministic simulator for multi-model federated learning.
//!
//! A server trains M unrelated softmax-regression models over a pool of
//! clients, each of which can train at most one model per round. Client
//! selection and model assignment are pluggable policies: uniform random
//! (Multi-FedAvg), per-model discounted-UCB rank lists (Ranklist-Multi-UCB),
//! or Pareto-front selection over the clients' UCB score vectors
//! (Pareto-Multi-UCB). A single-model FedAvg baseline trains each model in
//! its own run at half the clients per round.
//!
//! Everything — synthetic data, client sampling, SGD shuffles — derives from
//! one master seed, so a full experiment is a pure function of its config.
//!
//! * [`datagen`] — Synthetic(α, β) / Synthetic-IID federated datasets.
//! * [`learner`] — softmax regression: loss, gradient, SGD, accuracy.
//! * [`scoring`] — per-(client, model) loss history and UCB score vectors.
//! * [`policies`] — selection/assignment policies plus the warm-up schedule.
//! * [`server`] — the round loop: dispatch, aggregation, evaluation.
//! * [`expio`] — configs, CSV metrics, and the CLI.

pub mod datagen;
pub mod error;
pub mod expio;
pub mod learner;
pub mod policies;
pub mod scoring;
pub mod seed;
pub mod server;

pub use error::{Error, Result};
