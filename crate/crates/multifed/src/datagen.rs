//! Synthetic federated dataset generation.
//!
//! Builds the Synthetic(α, β) family: per-client labelled feature vectors
//! produced by a per-client ground-truth softmax model. `alpha` controls how
//! much the ground-truth weights vary across clients, `beta` controls how
//! much the feature distribution varies. With `iid = true` every client draws
//! from one shared generator, so local distributions are identical.
//!
//! Each model in the spec gets its own independently seeded dataset, keeping
//! the tasks statistically unrelated. Per-client sample counts are drawn from
//! a log-normal around the spec's mean so that client data shares `p_k(i)`
//! are non-uniform.

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Normal};
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::seed::{mix, stream};

/// Spread of the log-normal used for per-client sample counts. Wide enough
/// that a few clients hold a large share of each model's data, which is what
/// makes the data shares p_k(i) and the share-weighted aggregation
/// non-trivial.
const SAMPLE_COUNT_SIGMA: f64 = 1.5;

/// Smallest per-client sample count that still leaves a non-empty train and
/// test side after the split.
const MIN_SAMPLES_PER_CLIENT: usize = 4;

/// One classification task: `dim`-dimensional features into `num_classes`
/// classes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelSpec {
    pub dim: usize,
    pub num_classes: usize,
    pub mean_samples_per_client: usize,
}

impl ModelSpec {
    pub fn new(dim: usize, num_classes: usize, mean_samples_per_client: usize) -> Self {
        Self {
            dim,
            num_classes,
            mean_samples_per_client,
        }
    }

    fn validate(&self, index: usize) -> Result<()> {
        if self.dim < 1 {
            return Err(Error::invalid(
                "model spec",
                format!("model {index}: dim must be >= 1"),
            ));
        }
        if self.num_classes < 2 {
            return Err(Error::invalid(
                "model spec",
                format!("model {index}: num_classes must be >= 2"),
            ));
        }
        if self.mean_samples_per_client < MIN_SAMPLES_PER_CLIENT {
            return Err(Error::invalid(
                "model spec",
                format!(
                    "model {index}: mean_samples_per_client must be >= {MIN_SAMPLES_PER_CLIENT} \
                     to guarantee non-empty train/test splits"
                ),
            ));
        }
        Ok(())
    }
}

/// Full description of a synthetic federated dataset. Generation is a pure
/// function of this value.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    /// Variance of the per-client ground-truth weight perturbation.
    pub alpha: f64,
    /// Variance of the per-client feature-distribution perturbation.
    pub beta: f64,
    /// Identical local data distribution and ground truth for all clients.
    pub iid: bool,
    pub num_clients: usize,
    pub models: Vec<ModelSpec>,
    pub seed: u64,
    /// Fraction of each client's examples held out as its test set.
    pub test_fraction: f64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_clients < 1 {
            return Err(Error::invalid("synthetic spec", "num_clients must be >= 1"));
        }
        if self.models.is_empty() {
            return Err(Error::invalid("synthetic spec", "models must be non-empty"));
        }
        if !self.alpha.is_finite() || self.alpha < 0.0 {
            return Err(Error::invalid(
                "synthetic spec",
                "alpha must be finite and >= 0",
            ));
        }
        if !self.beta.is_finite() || self.beta < 0.0 {
            return Err(Error::invalid(
                "synthetic spec",
                "beta must be finite and >= 0",
            ));
        }
        if !self.test_fraction.is_finite() || self.test_fraction <= 0.0 || self.test_fraction >= 1.0
        {
            return Err(Error::invalid(
                "synthetic spec",
                "test_fraction must lie in (0, 1)",
            ));
        }
        for (index, model) in self.models.iter().enumerate() {
            model.validate(index)?;
        }
        Ok(())
    }
}

/// A single labelled example.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub features: Vec<f64>,
    pub label: usize,
}

/// One client's train/test data for one model.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ClientModelData {
    pub train: Vec<Example>,
    pub test: Vec<Example>,
}

/// The ground-truth generator behind one client's data for one model. Kept
/// around so tests and diagnostics can inspect inter-client heterogeneity.
#[derive(Debug, Clone)]
pub struct ModelTruth {
    /// `num_classes x dim` ground-truth weight matrix.
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
    /// Mean of the feature distribution.
    pub feature_mean: Vec<f64>,
}

/// Ground truths indexed `[client][model]`.
#[derive(Debug, Clone)]
pub struct GeneratorTruth {
    pub per_client: Vec<Vec<ModelTruth>>,
}

/// Per-client, per-model train/test sets plus the derived data shares
/// `p_k(i)` used by scoring and aggregation. Immutable after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct FederatedDataset {
    spec: SyntheticSpec,
    /// Indexed `[client][model]`.
    data: Vec<Vec<ClientModelData>>,
    /// `train_share[client][model]` = client's fraction of that model's
    /// training samples; sums to 1 over clients for every model.
    train_share: Vec<Vec<f64>>,
}

impl FederatedDataset {
    /// Assembles a dataset from explicit per-client data, validating the
    /// dataset invariants and computing the train shares.
    pub fn from_parts(spec: SyntheticSpec, data: Vec<Vec<ClientModelData>>) -> Result<Self> {
        spec.validate()?;
        if data.len() != spec.num_clients {
            return Err(Error::ShapeMismatch(format!(
                "expected data for {} clients, got {}",
                spec.num_clients,
                data.len()
            )));
        }
        let num_models = spec.models.len();
        for (client, per_model) in data.iter().enumerate() {
            if per_model.len() != num_models {
                return Err(Error::ShapeMismatch(format!(
                    "client {client}: expected {num_models} models, got {}",
                    per_model.len()
                )));
            }
            for (model, d) in per_model.iter().enumerate() {
                if d.train.is_empty() || d.test.is_empty() {
                    return Err(Error::invalid(
                        "dataset",
                        format!("client {client}, model {model}: train and test must be non-empty"),
                    ));
                }
                let m = &spec.models[model];
                for ex in d.train.iter().chain(d.test.iter()) {
                    if ex.features.len() != m.dim {
                        return Err(Error::ShapeMismatch(format!(
                            "client {client}, model {model}: feature dim {} != {}",
                            ex.features.len(),
                            m.dim
                        )));
                    }
                    if ex.label >= m.num_classes {
                        return Err(Error::invalid(
                            "dataset",
                            format!(
                                "client {client}, model {model}: label {} out of range 0..{}",
                                ex.label, m.num_classes
                            ),
                        ));
                    }
                }
            }
        }

        let mut train_share = vec![vec![0.0; num_models]; spec.num_clients];
        for model in 0..num_models {
            let total: usize = data.iter().map(|c| c[model].train.len()).sum();
            for (client, per_model) in data.iter().enumerate() {
                train_share[client][model] = per_model[model].train.len() as f64 / total as f64;
            }
        }

        Ok(Self {
            spec,
            data,
            train_share,
        })
    }

    pub fn spec(&self) -> &SyntheticSpec {
        &self.spec
    }

    pub fn num_clients(&self) -> usize {
        self.spec.num_clients
    }

    pub fn num_models(&self) -> usize {
        self.spec.models.len()
    }

    pub fn model_specs(&self) -> &[ModelSpec] {
        &self.spec.models
    }

    pub fn train(&self, client: usize, model: usize) -> &[Example] {
        &self.data[client][model].train
    }

    pub fn test(&self, client: usize, model: usize) -> &[Example] {
        &self.data[client][model].test
    }

    /// `p_k(i)`: client `k`'s share of model `i`'s training samples.
    pub fn train_share(&self, client: usize, model: usize) -> f64 {
        self.train_share[client][model]
    }

    /// All shares, indexed `[client][model]`.
    pub fn train_shares(&self) -> &[Vec<f64>] {
        &self.train_share
    }

    /// Restriction of this dataset to a single model, used by the
    /// single-model baseline. Client data is preserved bit-for-bit.
    pub fn single_model_view(&self, model: usize) -> Result<FederatedDataset> {
        if model >= self.num_models() {
            return Err(Error::invalid(
                "model id",
                format!("model {model} out of range 0..{}", self.num_models()),
            ));
        }
        let spec = SyntheticSpec {
            models: vec![self.spec.models[model].clone()],
            ..self.spec.clone()
        };
        let data = self
            .data
            .iter()
            .map(|per_model| vec![per_model[model].clone()])
            .collect();
        FederatedDataset::from_parts(spec, data)
    }

    /// Serializes to the line-oriented text format: a header echoing the
    /// spec, then one line per example
    /// `client_id model_id split label f_1 ... f_d`. Floats are written in
    /// Rust's shortest round-trip decimal form, so `load` reproduces them
    /// exactly.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        let models = self
            .spec
            .models
            .iter()
            .map(|m| format!("{}:{}:{}", m.dim, m.num_classes, m.mean_samples_per_client))
            .collect::<Vec<_>>()
            .join(";");
        let _ = writeln!(
            out,
            "#multifed-dataset alpha={} beta={} iid={} num_clients={} seed={} test_fraction={} models={}",
            self.spec.alpha,
            self.spec.beta,
            self.spec.iid,
            self.spec.num_clients,
            self.spec.seed,
            self.spec.test_fraction,
            models
        );
        for (client, per_model) in self.data.iter().enumerate() {
            for (model, d) in per_model.iter().enumerate() {
                for (split, examples) in [("train", &d.train), ("test", &d.test)] {
                    for ex in examples {
                        let _ = write!(out, "{client} {model} {split} {}", ex.label);
                        for f in &ex.features {
                            let _ = write!(out, " {f}");
                        }
                        out.push('\n');
                    }
                }
            }
        }
        out
    }

    /// Parses the format produced by [`FederatedDataset::dump`].
    pub fn load(text: &str) -> Result<FederatedDataset> {
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::parse("dataset", "empty input"))?;
        let spec = parse_dump_header(header)?;

        let num_models = spec.models.len();
        let mut data: Vec<Vec<ClientModelData>> =
            vec![vec![ClientModelData::default(); num_models]; spec.num_clients];
        for (lineno, line) in lines.enumerate() {
            let lineno = lineno + 2;
            if line.trim().is_empty() {
                continue;
            }
            let mut fields = line.split_ascii_whitespace();
            let mut next = |what: &str| {
                fields.next().ok_or_else(|| {
                    Error::parse(format!("dataset line {lineno}"), format!("missing {what}"))
                })
            };
            let client: usize = parse_field(next("client_id")?, lineno, "client_id")?;
            let model: usize = parse_field(next("model_id")?, lineno, "model_id")?;
            let split = next("split")?.to_string();
            let label: usize = parse_field(next("label")?, lineno, "label")?;
            if client >= spec.num_clients || model >= num_models {
                return Err(Error::parse(
                    format!("dataset line {lineno}"),
                    "client or model id out of range",
                ));
            }
            let features = fields
                .map(|f| parse_field::<f64>(f, lineno, "feature"))
                .collect::<Result<Vec<f64>>>()?;
            let example = Example { features, label };
            match split.as_str() {
                "train" => data[client][model].train.push(example),
                "test" => data[client][model].test.push(example),
                other => {
                    return Err(Error::parse(
                        format!("dataset line {lineno}"),
                        format!("unknown split `{other}`"),
                    ))
                }
            }
        }
        FederatedDataset::from_parts(spec, data)
    }

    pub fn write_to(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.dump()).map_err(Error::io(path.display().to_string()))
    }

    pub fn read_from(path: &Path) -> Result<FederatedDataset> {
        let text = std::fs::read_to_string(path).map_err(Error::io(path.display().to_string()))?;
        FederatedDataset::load(&text)
    }
}

fn parse_field<T: std::str::FromStr>(s: &str, lineno: usize, what: &str) -> Result<T> {
    s.parse().map_err(|_| {
        Error::parse(
            format!("dataset line {lineno}"),
            format!("bad {what} `{s}`"),
        )
    })
}

fn parse_dump_header(header: &str) -> Result<SyntheticSpec> {
    let body = header
        .strip_prefix("#multifed-dataset ")
        .ok_or_else(|| Error::parse("dataset header", "missing #multifed-dataset prefix"))?;
    let mut alpha = None;
    let mut beta = None;
    let mut iid = None;
    let mut num_clients = None;
    let mut seed = None;
    let mut test_fraction = None;
    let mut models = None;
    for pair in body.split_ascii_whitespace() {
        let (key, value) = pair
            .split_once('=')
            .ok_or_else(|| Error::parse("dataset header", format!("bad field `{pair}`")))?;
        match key {
            "alpha" => alpha = Some(parse_field(value, 1, "alpha")?),
            "beta" => beta = Some(parse_field(value, 1, "beta")?),
            "iid" => iid = Some(parse_field(value, 1, "iid")?),
            "num_clients" => num_clients = Some(parse_field(value, 1, "num_clients")?),
            "seed" => seed = Some(parse_field(value, 1, "seed")?),
            "test_fraction" => test_fraction = Some(parse_field(value, 1, "test_fraction")?),
            "models" => models = Some(parse_model_list(value)?),
            other => {
                return Err(Error::parse(
                    "dataset header",
                    format!("unknown field `{other}`"),
                ))
            }
        }
    }
    let missing = || Error::parse("dataset header", "missing field");
    Ok(SyntheticSpec {
        alpha: alpha.ok_or_else(missing)?,
        beta: beta.ok_or_else(missing)?,
        iid: iid.ok_or_else(missing)?,
        num_clients: num_clients.ok_or_else(missing)?,
        models: models.ok_or_else(missing)?,
        seed: seed.ok_or_else(missing)?,
        test_fraction: test_fraction.ok_or_else(missing)?,
    })
}

/// Parses a `dim:classes:mean_samples` list separated by semicolons, the
/// same syntax used by the `models` config key.
pub fn parse_model_list(value: &str) -> Result<Vec<ModelSpec>> {
    value
        .split(';')
        .map(|triple| {
            let parts: Vec<&str> = triple.trim().split(':').collect();
            if parts.len() != 3 {
                return Err(Error::parse(
                    "model list",
                    format!("expected dim:classes:mean_samples, got `{triple}`"),
                ));
            }
            Ok(ModelSpec {
                dim: parse_field(parts[0], 1, "dim")?,
                num_classes: parse_field(parts[1], 1, "classes")?,
                mean_samples_per_client: parse_field(parts[2], 1, "mean_samples")?,
            })
        })
        .collect()
}

/// Generates the dataset described by `spec`. Pure function of the spec,
/// including its seed: two calls produce identical datasets.
pub fn generate(spec: &SyntheticSpec) -> Result<FederatedDataset> {
    generate_with_truth(spec).map(|(dataset, _)| dataset)
}

/// Like [`generate`], additionally returning the per-client ground-truth
/// generators.
pub fn generate_with_truth(spec: &SyntheticSpec) -> Result<(FederatedDataset, GeneratorTruth)> {
    spec.validate()?;
    let num_models = spec.models.len();
    let mut data: Vec<Vec<ClientModelData>> =
        vec![Vec::with_capacity(num_models); spec.num_clients];
    let mut truths: Vec<Vec<ModelTruth>> = vec![Vec::with_capacity(num_models); spec.num_clients];

    for (model_idx, model) in spec.models.iter().enumerate() {
        let model_seed = mix(spec.seed, &[stream::MODEL, model_idx as u64]);

        // In IID mode a single shared generator stands in for every client.
        let shared_truth = if spec.iid {
            let mut rng = ChaCha8Rng::seed_from_u64(mix(model_seed, &[stream::SHARED_TRUTH]));
            Some(sample_truth(model, 0.0, 0.0, true, &mut rng))
        } else {
            None
        };

        for client in 0..spec.num_clients {
            let mut rng =
                ChaCha8Rng::seed_from_u64(mix(model_seed, &[stream::CLIENT, client as u64]));
            let count = sample_count(model.mean_samples_per_client, &mut rng);
            let truth = match &shared_truth {
                Some(t) => t.clone(),
                None => sample_truth(model, spec.alpha, spec.beta, false, &mut rng),
            };
            let examples: Vec<Example> = (0..count)
                .map(|_| sample_example(model, &truth, &mut rng))
                .collect();
            let split_seed = mix(model_seed, &[stream::SPLIT, client as u64]);
            let (train, test) = split_train_test(examples, spec.test_fraction, split_seed)?;
            data[client].push(ClientModelData { train, test });
            truths[client].push(truth);
        }
    }

    let dataset = FederatedDataset::from_parts(spec.clone(), data)?;
    Ok((dataset, GeneratorTruth { per_client: truths }))
}

fn sample_count(mean: usize, rng: &mut ChaCha8Rng) -> usize {
    let dist = LogNormal::new((mean as f64).ln(), SAMPLE_COUNT_SIGMA).expect("valid log-normal");
    let drawn = dist.sample(rng).round() as usize;
    drawn.max(MIN_SAMPLES_PER_CLIENT)
}

fn sample_truth(
    model: &ModelSpec,
    alpha: f64,
    beta: f64,
    iid: bool,
    rng: &mut ChaCha8Rng,
) -> ModelTruth {
    // u_k ~ N(0, alpha), then ground-truth weights W_k, b_k ~ N(u_k, 1).
    let u = Normal::new(0.0, alpha.sqrt())
        .expect("valid normal")
        .sample(rng);
    let entry = Normal::new(u, 1.0).expect("valid normal");
    let mut weights = Array2::zeros((model.num_classes, model.dim));
    for c in 0..model.num_classes {
        for d in 0..model.dim {
            weights[[c, d]] = entry.sample(rng);
        }
    }
    let mut bias = Array1::zeros(model.num_classes);
    for c in 0..model.num_classes {
        bias[c] = entry.sample(rng);
    }
    // Feature mean v_k: coordinates ~ N(B_k, 1) with B_k ~ N(0, beta). The
    // shared IID generator centers features at the origin instead.
    let feature_mean = if iid {
        vec![0.0; model.dim]
    } else {
        let b = Normal::new(0.0, beta.sqrt())
            .expect("valid normal")
            .sample(rng);
        let coord = Normal::new(b, 1.0).expect("valid normal");
        (0..model.dim).map(|_| coord.sample(rng)).collect()
    };
    ModelTruth {
        weights,
        bias,
        feature_mean,
    }
}

fn sample_example(model: &ModelSpec, truth: &ModelTruth, rng: &mut ChaCha8Rng) -> Example {
    // Diagonal feature covariance with decaying scales sigma_jj = j^{-1.2}
    // (1-based j).
    let features: Vec<f64> = (0..model.dim)
        .map(|j| {
            let sd = ((j + 1) as f64).powf(-0.6);
            Normal::new(truth.feature_mean[j], sd)
                .expect("valid normal")
                .sample(rng)
        })
        .collect();
    // Label = argmax of softmax(Wx + b) = argmax of the logits.
    let mut best = 0;
    let mut best_logit = f64::NEG_INFINITY;
    for c in 0..model.num_classes {
        let mut logit = truth.bias[c];
        for (d, f) in features.iter().enumerate() {
            logit += truth.weights[[c, d]] * f;
        }
        if logit > best_logit {
            best_logit = logit;
            best = c;
        }
    }
    Example {
        features,
        label: best,
    }
}

/// Shuffles `examples` with a seeded RNG and holds out
/// `max(1, round(test_fraction * n))` of them (capped at `n - 1` so the
/// train side is never empty). Deterministic under `seed`.
pub fn split_train_test(
    mut examples: Vec<Example>,
    test_fraction: f64,
    seed: u64,
) -> Result<(Vec<Example>, Vec<Example>)> {
    let n = examples.len();
    if n < 2 {
        return Err(Error::invalid(
            "split",
            format!("need at least 2 examples, got {n}"),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    examples.shuffle(&mut rng);
    let num_test = ((test_fraction * n as f64).round() as usize)
        .max(1)
        .min(n - 1);
    let train = examples.split_off(num_test);
    Ok((train, examples))
}
