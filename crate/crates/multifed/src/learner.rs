//! Softmax regression trained by mini-batch SGD.
//!
//! This is the local-training primitive the server dispatches to clients:
//! multinomial logistic regression with cross-entropy loss. All operations
//! are pure; `local_train` returns fresh weights and never mutates its
//! input, so many clients can train in parallel within a round.

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::datagen::Example;
use crate::error::{Error, Result};

/// Probabilities are floored at this value before taking logs so the loss
/// stays finite even for confidently wrong predictions.
const PROB_FLOOR: f64 = 1e-12;

/// Dense parameters of one softmax-regression model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    /// `num_classes x dim`.
    pub matrix: Array2<f64>,
    pub bias: Array1<f64>,
}

impl ModelWeights {
    /// Zero-initialized weights, the starting point for every global model.
    pub fn zeros(num_classes: usize, dim: usize) -> Self {
        Self {
            matrix: Array2::zeros((num_classes, dim)),
            bias: Array1::zeros(num_classes),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn dim(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn is_finite(&self) -> bool {
        self.matrix.iter().all(|v| v.is_finite()) && self.bias.iter().all(|v| v.is_finite())
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::ShapeMismatch(format!(
                "feature dim {} != model dim {}",
                x.len(),
                self.dim()
            )));
        }
        Ok(())
    }
}

/// Local-training hyperparameters. The shuffle order is a pure function of
/// `seed`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 1,
            learning_rate: 0.05,
            batch_size: 10,
            seed: 0,
        }
    }
}

fn logits(w: &ModelWeights, x: &[f64]) -> Array1<f64> {
    let mut out = w.bias.clone();
    for (c, v) in out.iter_mut().enumerate() {
        let mut acc = 0.0;
        for (d, f) in x.iter().enumerate() {
            acc += w.matrix[[c, d]] * f;
        }
        *v += acc;
    }
    out
}

fn softmax_in_place(logits: &mut Array1<f64>) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in logits.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in logits.iter_mut() {
        *v /= sum;
    }
}

/// Class probabilities `softmax(Wx + b)`. Entries are positive and sum to 1.
pub fn predict_proba(w: &ModelWeights, x: &[f64]) -> Result<Vec<f64>> {
    w.check_input(x)?;
    let mut scores = logits(w, x);
    softmax_in_place(&mut scores);
    Ok(scores.to_vec())
}

/// Mean cross-entropy and its analytic gradient over the examples picked out
/// by `idx`, all computed at `w`. Single pass; everything downstream of the
/// softmax shares it.
fn loss_and_gradient(
    w: &ModelWeights,
    data: &[Example],
    idx: &[usize],
) -> Result<(f64, Array2<f64>, Array1<f64>)> {
    if idx.is_empty() {
        return Err(Error::Empty("example"));
    }
    let classes = w.num_classes();
    let dim = w.dim();
    let mut grad_matrix = Array2::zeros((classes, dim));
    let mut grad_bias = Array1::zeros(classes);
    let mut loss = 0.0;
    for &i in idx {
        let ex = &data[i];
        w.check_input(&ex.features)?;
        if ex.label >= classes {
            return Err(Error::invalid(
                "example",
                format!("label {} out of range 0..{classes}", ex.label),
            ));
        }
        let mut p = logits(w, &ex.features);
        softmax_in_place(&mut p);
        loss += -(p[ex.label].max(PROB_FLOOR)).ln();
        for c in 0..classes {
            let delta = p[c] - if c == ex.label { 1.0 } else { 0.0 };
            grad_bias[c] += delta;
            for (d, f) in ex.features.iter().enumerate() {
                grad_matrix[[c, d]] += delta * f;
            }
        }
    }
    let n = idx.len() as f64;
    loss /= n;
    grad_matrix /= n;
    grad_bias /= n;
    Ok((loss, grad_matrix, grad_bias))
}

/// Mean cross-entropy of `w` on `data`.
pub fn local_loss(w: &ModelWeights, data: &[Example]) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Empty("loss"));
    }
    let idx: Vec<usize> = (0..data.len()).collect();
    loss_and_gradient(w, data, &idx).map(|(loss, _, _)| loss)
}

/// Analytic gradient of the mean cross-entropy at `w`, as
/// `(d loss / d matrix, d loss / d bias)`.
pub fn loss_gradient(w: &ModelWeights, data: &[Example]) -> Result<(Array2<f64>, Array1<f64>)> {
    if data.is_empty() {
        return Err(Error::Empty("gradient"));
    }
    let idx: Vec<usize> = (0..data.len()).collect();
    loss_and_gradient(w, data, &idx).map(|(_, gm, gb)| (gm, gb))
}

/// Runs `cfg.epochs` passes of mini-batch SGD starting from `w` and returns
/// the new weights together with the observed training loss: the mean over
/// all batches of the batch loss evaluated at the weights in force *before*
/// that batch's update. This running pre-update loss is what the scoring
/// module consumes.
pub fn local_train(
    w: &ModelWeights,
    train: &[Example],
    cfg: &TrainConfig,
) -> Result<(ModelWeights, f64)> {
    if train.is_empty() {
        return Err(Error::Empty("train"));
    }
    if cfg.batch_size < 1 || cfg.epochs < 1 {
        return Err(Error::invalid(
            "train config",
            "epochs and batch_size must be >= 1",
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut weights = w.clone();
    let mut loss_sum = 0.0;
    let mut batches = 0usize;
    let mut order: Vec<usize> = (0..train.len()).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let (loss, grad_matrix, grad_bias) = loss_and_gradient(&weights, train, batch)?;
            loss_sum += loss;
            batches += 1;
            weights.matrix.scaled_add(-cfg.learning_rate, &grad_matrix);
            weights.bias.scaled_add(-cfg.learning_rate, &grad_bias);
        }
    }
    Ok((weights, loss_sum / batches as f64))
}

/// Fraction of examples whose argmax predicted class equals the label.
/// Ties break toward the lowest class index.
pub fn accuracy(w: &ModelWeights, test: &[Example]) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::Empty("test"));
    }
    let mut correct = 0usize;
    for ex in test {
        w.check_input(&ex.features)?;
        let scores = logits(w, &ex.features);
        let mut best = 0;
        for c in 1..scores.len() {
            if scores[c] > scores[best] {
                best = c;
            }
        }
        if best == ex.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / test.len() as f64)
}
