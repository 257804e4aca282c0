//! Experiment configuration, metrics output, and the command-line entry
//! point.
//!
//! Configs are flat `key = value` text, one pair per line, `#` comments.
//! Metrics are written as CSV with the fixed header
//! `round,model,policy,weighted_accuracy,mean_train_loss,num_selected,warmup`,
//! floats at 6 decimal places, LF line endings. A fixed `master_seed` makes
//! every subcommand fully reproducible.

use clap::{Parser, Subcommand};
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use crate::datagen::{self, parse_model_list, ModelSpec, SyntheticSpec};
use crate::error::{Error, Result};
use crate::learner::TrainConfig;
use crate::seed::{mix, stream};
use crate::server::{self, Policy};

/// Full description of one experiment. Every random stream derives from
/// `master_seed`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub alpha: f64,
    pub beta: f64,
    pub iid: bool,
    pub num_clients: usize,
    pub models: Vec<ModelSpec>,
    pub policy: Policy,
    /// The paper's K: clients selected per round.
    pub clients_per_round: usize,
    pub total_rounds: u64,
    pub eval_every: u64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Discount factor for the UCB loss history.
    pub gamma: f64,
    pub master_seed: u64,
    /// Train each model in its own single-model FedAvg run with half the
    /// clients per round.
    pub baseline_mode: bool,
    pub test_fraction: f64,
}

impl ExperimentConfig {
    /// The dataset this experiment runs on. Its seed is derived from the
    /// master seed, so identical master seeds see identical data regardless
    /// of policy.
    pub fn synthetic_spec(&self) -> SyntheticSpec {
        SyntheticSpec {
            alpha: self.alpha,
            beta: self.beta,
            iid: self.iid,
            num_clients: self.num_clients,
            models: self.models.clone(),
            seed: mix(self.master_seed, &[stream::DATASET]),
            test_fraction: self.test_fraction,
        }
    }

    /// Local-training hyperparameters. The per-client shuffle seed is filled
    /// in by the server each round.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            seed: 0,
        }
    }

    /// `baseline_mode` forces the single-model FedAvg decomposition.
    pub fn effective_policy(&self) -> Policy {
        if self.baseline_mode {
            Policy::SingleFedAvg
        } else {
            self.policy
        }
    }

    /// Checks every config invariant. `total_rounds = 0` is tolerated here
    /// (it runs nothing but the round-0 evaluation); the config parser is
    /// stricter.
    pub fn validate(&self) -> Result<()> {
        self.synthetic_spec().validate()?;
        if self.clients_per_round < 1 || self.clients_per_round > self.num_clients {
            return Err(Error::invalid(
                "config",
                format!(
                    "K = {} violates 1 <= K <= num_clients = {}",
                    self.clients_per_round, self.num_clients
                ),
            ));
        }
        if self.eval_every < 1 {
            return Err(Error::invalid("config", "eval_every must be >= 1"));
        }
        if self.total_rounds > 0 && self.eval_every > self.total_rounds {
            return Err(Error::invalid(
                "config",
                format!(
                    "eval_every = {} violates eval_every <= total_rounds = {}",
                    self.eval_every, self.total_rounds
                ),
            ));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::invalid("config", "gamma must lie in (0, 1]"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("config", "train.lr must be finite and > 0"));
        }
        if self.batch_size < 1 {
            return Err(Error::invalid("config", "train.batch_size must be >= 1"));
        }
        if self.epochs < 1 {
            return Err(Error::invalid("config", "train.epochs must be >= 1"));
        }
        Ok(())
    }

    /// Serializes to the same `key = value` format `parse_config` reads.
    pub fn to_config_string(&self) -> String {
        let models = self
            .models
            .iter()
            .map(|m| format!("{}:{}:{}", m.dim, m.num_classes, m.mean_samples_per_client))
            .collect::<Vec<_>>()
            .join(";");
        format!(
            "alpha = {}\nbeta = {}\niid = {}\nnum_clients = {}\nmodels = {}\npolicy = {}\n\
             K = {}\ntotal_rounds = {}\neval_every = {}\ntrain.lr = {}\ntrain.batch_size = {}\n\
             train.epochs = {}\ngamma = {}\nmaster_seed = {}\nbaseline_mode = {}\ntest_fraction = {}\n",
            self.alpha,
            self.beta,
            self.iid,
            self.num_clients,
            models,
            self.policy.name(),
            self.clients_per_round,
            self.total_rounds,
            self.eval_every,
            self.learning_rate,
            self.batch_size,
            self.epochs,
            self.gamma,
            self.master_seed,
            self.baseline_mode,
            self.test_fraction,
        )
    }
}

fn parse_value<T: std::str::FromStr>(value: &str, line: usize, key: &str) -> Result<T> {
    value.parse().map_err(|_| Error::Config {
        line,
        msg: format!("bad value `{value}` for key `{key}`"),
    })
}

/// Parses the flat `key = value` config format. Unknown and duplicate keys
/// are rejected with the offending line number; missing optional keys take
/// the documented defaults; the result always satisfies the config
/// invariants.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let mut alpha: Option<f64> = None;
    let mut beta: Option<f64> = None;
    let mut iid: Option<bool> = None;
    let mut num_clients: Option<usize> = None;
    let mut models: Option<Vec<ModelSpec>> = None;
    let mut policy: Option<Policy> = None;
    let mut clients_per_round: Option<usize> = None;
    let mut total_rounds: Option<u64> = None;
    let mut eval_every: Option<u64> = None;
    let mut learning_rate: Option<f64> = None;
    let mut batch_size: Option<usize> = None;
    let mut epochs: Option<usize> = None;
    let mut gamma: Option<f64> = None;
    let mut master_seed: Option<u64> = None;
    let mut baseline_mode: Option<bool> = None;
    let mut test_fraction: Option<f64> = None;

    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let stripped = raw.split('#').next().unwrap_or("").trim();
        if stripped.is_empty() {
            continue;
        }
        let (key, value) = stripped.split_once('=').ok_or(Error::Config {
            line,
            msg: format!("expected `key = value`, got `{stripped}`"),
        })?;
        let key = key.trim();
        let value = value.trim();
        macro_rules! set {
            ($slot:ident, $parsed:expr) => {{
                if $slot.is_some() {
                    return Err(Error::Config {
                        line,
                        msg: format!("duplicate key `{key}`"),
                    });
                }
                $slot = Some($parsed);
            }};
        }
        match key {
            "alpha" => set!(alpha, parse_value(value, line, key)?),
            "beta" => set!(beta, parse_value(value, line, key)?),
            "iid" => set!(iid, parse_value(value, line, key)?),
            "num_clients" => set!(num_clients, parse_value(value, line, key)?),
            "models" => set!(
                models,
                parse_model_list(value).map_err(|e| Error::Config {
                    line,
                    msg: e.to_string(),
                })?
            ),
            "policy" => set!(
                policy,
                Policy::from_name(value).map_err(|e| Error::Config {
                    line,
                    msg: e.to_string(),
                })?
            ),
            "K" => set!(clients_per_round, parse_value(value, line, key)?),
            "total_rounds" => set!(total_rounds, parse_value(value, line, key)?),
            "eval_every" => set!(eval_every, parse_value(value, line, key)?),
            "train.lr" => set!(learning_rate, parse_value(value, line, key)?),
            "train.batch_size" => set!(batch_size, parse_value(value, line, key)?),
            "train.epochs" => set!(epochs, parse_value(value, line, key)?),
            "gamma" => set!(gamma, parse_value(value, line, key)?),
            "master_seed" => set!(master_seed, parse_value(value, line, key)?),
            "baseline_mode" => set!(baseline_mode, parse_value(value, line, key)?),
            "test_fraction" => set!(test_fraction, parse_value(value, line, key)?),
            other => {
                return Err(Error::Config {
                    line,
                    msg: format!("unknown key `{other}`"),
                })
            }
        }
    }

    let require = |name: &str| Error::invalid("config", format!("missing required key `{name}`"));
    let cfg = ExperimentConfig {
        alpha: alpha.unwrap_or(1.0),
        beta: beta.unwrap_or(1.0),
        iid: iid.unwrap_or(false),
        num_clients: num_clients.ok_or_else(|| require("num_clients"))?,
        models: models.ok_or_else(|| require("models"))?,
        policy: policy.ok_or_else(|| require("policy"))?,
        clients_per_round: clients_per_round.ok_or_else(|| require("K"))?,
        total_rounds: total_rounds.ok_or_else(|| require("total_rounds"))?,
        eval_every: eval_every.unwrap_or(10),
        learning_rate: learning_rate.unwrap_or(0.05),
        batch_size: batch_size.unwrap_or(10),
        epochs: epochs.unwrap_or(1),
        gamma: gamma.unwrap_or(0.9),
        master_seed: master_seed.ok_or_else(|| require("master_seed"))?,
        baseline_mode: baseline_mode.unwrap_or(false),
        test_fraction: test_fraction.unwrap_or(0.2),
    };
    if cfg.total_rounds < 1 {
        return Err(Error::invalid("config", "total_rounds must be >= 1"));
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(Error::io(path.display().to_string()))?;
    parse_config(&text)
}

/// One evaluation row: the state of one model at one evaluation round.
#[derive(Debug, Clone)]
pub struct MetricsRow {
    pub round: u64,
    pub model: usize,
    pub policy: String,
    pub weighted_accuracy: f64,
    /// Mean observed training loss for this model since the previous
    /// evaluation; NaN when nobody trained it in that window (always the
    /// case at round 0).
    pub mean_train_loss: f64,
    /// Number of client trainings of this model since the previous
    /// evaluation.
    pub num_selected: u64,
    /// Whether any round in the window was a warm-up round.
    pub warmup: bool,
}

impl PartialEq for MetricsRow {
    fn eq(&self, other: &Self) -> bool {
        self.round == other.round
            && self.model == other.model
            && self.policy == other.policy
            && self
                .weighted_accuracy
                .total_cmp(&other.weighted_accuracy)
                .is_eq()
            && self
                .mean_train_loss
                .total_cmp(&other.mean_train_loss)
                .is_eq()
            && self.num_selected == other.num_selected
            && self.warmup == other.warmup
    }
}

/// All evaluation rows of one experiment, ordered by (round, model).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricsLog {
    pub rows: Vec<MetricsRow>,
}

const CSV_HEADER: &str = "round,model,policy,weighted_accuracy,mean_train_loss,num_selected,warmup";

impl MetricsLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for row in &self.rows {
            out.push_str(&format!(
                "{},{},{},{:.6},{:.6},{},{}\n",
                row.round,
                row.model,
                row.policy,
                row.weighted_accuracy,
                row.mean_train_loss,
                row.num_selected,
                u8::from(row.warmup),
            ));
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<MetricsLog> {
        let mut lines = text.lines();
        match lines.next() {
            Some(header) if header == CSV_HEADER => {}
            other => {
                return Err(Error::parse(
                    "metrics csv",
                    format!("bad header {other:?}, expected `{CSV_HEADER}`"),
                ))
            }
        }
        let rows = lines
            .enumerate()
            .filter(|(_, line)| !line.is_empty())
            .map(|(idx, line)| {
                let lineno = idx + 2;
                let fields: Vec<&str> = line.split(',').collect();
                if fields.len() != 7 {
                    return Err(Error::parse(
                        format!("metrics csv line {lineno}"),
                        format!("expected 7 fields, got {}", fields.len()),
                    ));
                }
                let field = |i: usize, what: &str| -> Result<&str> {
                    fields.get(i).copied().ok_or_else(|| {
                        Error::parse(
                            format!("metrics csv line {lineno}"),
                            format!("missing {what}"),
                        )
                    })
                };
                let parse = |s: &str, what: &str| -> Result<f64> {
                    s.parse().map_err(|_| {
                        Error::parse(
                            format!("metrics csv line {lineno}"),
                            format!("bad {what} `{s}`"),
                        )
                    })
                };
                Ok(MetricsRow {
                    round: field(0, "round")?.parse().map_err(|_| {
                        Error::parse(format!("metrics csv line {lineno}"), "bad round")
                    })?,
                    model: field(1, "model")?.parse().map_err(|_| {
                        Error::parse(format!("metrics csv line {lineno}"), "bad model")
                    })?,
                    policy: field(2, "policy")?.to_string(),
                    weighted_accuracy: parse(field(3, "weighted_accuracy")?, "weighted_accuracy")?,
                    mean_train_loss: parse(field(4, "mean_train_loss")?, "mean_train_loss")?,
                    num_selected: field(5, "num_selected")?.parse().map_err(|_| {
                        Error::parse(format!("metrics csv line {lineno}"), "bad num_selected")
                    })?,
                    warmup: match field(6, "warmup")? {
                        "0" => false,
                        "1" => true,
                        other => {
                            return Err(Error::parse(
                                format!("metrics csv line {lineno}"),
                                format!("bad warmup flag `{other}`"),
                            ))
                        }
                    },
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(MetricsLog { rows })
    }
}

/// Writes the CSV described in the module docs.
pub fn write_metrics(log: &MetricsLog, path: &Path) -> Result<()> {
    std::fs::write(path, log.to_csv()).map_err(Error::io(path.display().to_string()))
}

pub fn read_metrics(path: &Path) -> Result<MetricsLog> {
    let text = std::fs::read_to_string(path).map_err(Error::io(path.display().to_string()))?;
    MetricsLog::from_csv(&text)
}

/// The master seed of one grid cell: a documented mix of the base master
/// seed with the cell's policy index and K, so cells are independent of
/// execution order.
pub fn grid_cell_seed(master_seed: u64, policy: Policy, k: usize) -> u64 {
    mix(master_seed, &[stream::GRID, policy.index(), k as u64])
}

/// The config a grid cell runs: policy and K overridden, master seed
/// re-derived via [`grid_cell_seed`], everything else inherited.
pub fn grid_cell_config(base: &ExperimentConfig, policy: Policy, k: usize) -> ExperimentConfig {
    ExperimentConfig {
        policy,
        clients_per_round: k,
        master_seed: grid_cell_seed(base.master_seed, policy, k),
        ..base.clone()
    }
}

/// Runs every (policy, K) cell and writes one CSV per cell into `out_dir`.
/// Returns the written paths.
pub fn run_grid(
    base: &ExperimentConfig,
    policies: &[Policy],
    ks: &[usize],
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    if policies.is_empty() || ks.is_empty() {
        return Err(Error::invalid("grid", "need at least one policy and one K"));
    }
    std::fs::create_dir_all(out_dir).map_err(Error::io(out_dir.display().to_string()))?;
    let mut written = Vec::new();
    for &policy in policies {
        for &k in ks {
            let cfg = grid_cell_config(base, policy, k);
            let log = server::run_experiment(&cfg)?;
            let path = out_dir.join(format!("{}_K{}.csv", policy.name(), k));
            write_metrics(&log, &path)?;
            written.push(path);
        }
    }
    Ok(written)
}

#[derive(Parser)]
#[command(
    name = "multifed",
    about = "Deterministic multi-model federated learning simulator",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a single experiment and write its metrics CSV.
    Run {
        /// Experiment config file (key = value lines).
        #[arg(long)]
        config: PathBuf,
        /// Output CSV path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Sweep policies x clients-per-round; one CSV per cell.
    Grid {
        /// Base experiment config file.
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated policy names.
        #[arg(long, value_delimiter = ',', required = true)]
        policies: Vec<String>,
        /// Comma-separated K values.
        #[arg(long = "clients-per-round", value_delimiter = ',', required = true)]
        clients_per_round: Vec<usize>,
        /// Directory for the per-cell CSVs.
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Generate the config's dataset and dump it as text.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

/// CLI entry point. Returns the process exit code: 0 on success, 1 on a
/// runtime error (with a diagnostic on stderr), 2 on bad flags.
pub fn cli_run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(err) => {
            let _ = err.print();
            return err.exit_code();
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(err) => {
            eprintln!("error: {err}");
            1
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run { config, out } => {
            let cfg = load_config(&config)?;
            let log = server::run_experiment(&cfg)?;
            write_metrics(&log, &out)?;
            let last_round = log.rows.last().map(|r| r.round).unwrap_or(0);
            for row in log.rows.iter().filter(|r| r.round == last_round) {
                println!(
                    "round {} model {} ({}): weighted accuracy {:.4}",
                    row.round, row.model, row.policy, row.weighted_accuracy
                );
            }
            println!("wrote {}", out.display());
            Ok(())
        }
        Command::Grid {
            config,
            policies,
            clients_per_round,
            out_dir,
        } => {
            let base = load_config(&config)?;
            let policies = policies
                .iter()
                .map(|name| Policy::from_name(name))
                .collect::<Result<Vec<_>>>()?;
            let written = run_grid(&base, &policies, &clients_per_round, &out_dir)?;
            for path in &written {
                println!("wrote {}", path.display());
            }
            Ok(())
        }
        Command::GenData { config, out } => {
            let cfg = load_config(&config)?;
            let dataset = datagen::generate(&cfg.synthetic_spec())?;
            dataset.write_to(&out)?;
            println!(
                "wrote {} ({} clients x {} models)",
                out.display(),
                dataset.num_clients(),
                dataset.num_models()
            );
            Ok(())
        }
    }
}
