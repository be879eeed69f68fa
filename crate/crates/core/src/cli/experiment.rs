//! Multi-arm, multi-seed training experiments described by a JSON config.
//!
//! ```json
//! {
//!   "network": {"generate": {"widths": [2, 5, 1], "output": "logistic"}},
//!   "data": {"circles": {"n_train": 400, "n_test": 200, "noise": 0.05}},
//!   "train": {"learning_rate": 0.5, "batch_size": 16, "epochs": 100,
//!             "loss": "binary_cross_entropy"},
//!   "arms": [{"name": "plain"},
//!            {"name": "balanced", "balance": {"mode": "full_at_start", "tol": 1e-10, "cost": "l2"}}],
//!   "seeds": [0, 1, 2],
//!   "out": "runs/circles"
//! }
//! ```
//!
//! Relative paths are resolved against the config file's directory. Each
//! seed drives network initialization, data generation or subsampling, and
//! minibatch order, so arms sharing a seed start from the same state.

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{read_network, write_json};
use crate::activations::ActivationSpec;
use crate::error::{Error, Result};
use crate::netgraph::{serialize, LayeredNet, Network};
use crate::training::{
    load_csv, load_idx, make_concentric_circles, sgd_train, stratified_subsample,
    write_metrics_csv, BalanceMode, CsvSchema, Dataset, MetricsRow, Regularization, TrainConfig,
};

/// Offset between the training and test seeds of generated data.
const TEST_SEED_OFFSET: u64 = 0x9e37_79b9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum NetworkSource {
    /// A network document, used as-is for every seed.
    Path(PathBuf),
    Generate {
        widths: Vec<usize>,
        #[serde(default = "default_hidden")]
        hidden: String,
        #[serde(default = "default_output")]
        output: String,
        #[serde(default = "default_true")]
        bias: bool,
    },
}

fn default_hidden() -> String {
    "relu".into()
}

fn default_output() -> String {
    "identity".into()
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Circles {
        n_train: usize,
        n_test: usize,
        #[serde(default)]
        noise: f64,
    },
    Csv {
        train: PathBuf,
        test: PathBuf,
        label_column: String,
        /// Omit for regression targets.
        #[serde(default)]
        num_classes: Option<usize>,
    },
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
        num_classes: usize,
        /// Stratified fraction of the training set to keep.
        #[serde(default)]
        fraction: Option<f64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Arm {
    pub name: String,
    #[serde(default)]
    pub balance: BalanceMode,
    /// Replaces the shared regularizer when present.
    #[serde(default)]
    pub regularizer: Option<Regularization>,
    /// Drops the shared regularizer.
    #[serde(default)]
    pub no_regularizer: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub network: NetworkSource,
    pub data: DataSource,
    pub train: TrainConfig,
    /// Defaults to one arm named `default` using `train` unchanged.
    #[serde(default)]
    pub arms: Vec<Arm>,
    /// Defaults to `[train.seed]`.
    #[serde(default)]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ArmSummary {
    pub name: String,
    pub runs: usize,
    pub diverged_seeds: Vec<u64>,
    pub final_train_loss_mean: Option<f64>,
    pub final_test_accuracy_mean: Option<f64>,
    pub final_deficit_mean: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentSummary {
    pub arms: Vec<ArmSummary>,
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn build_network(src: &NetworkSource, base: &Path, seed: u64) -> Result<Network> {
    match src {
        NetworkSource::Path(p) => read_network(&resolve(base, p)),
        NetworkSource::Generate { widths, hidden, output, bias } => {
            if widths.len() < 2 || widths.contains(&0) {
                return Err(Error::TrainConfig(format!(
                    "widths {widths:?}: need at least two nonzero layers"
                )));
            }
            let hidden: ActivationSpec = hidden.parse()?;
            let output: ActivationSpec = output.parse()?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            Ok(LayeredNet::new(widths).hidden(hidden).output(output).bias(*bias).build(&mut rng))
        }
    }
}

fn load_data(src: &DataSource, base: &Path, seed: u64) -> Result<(Dataset, Dataset)> {
    match src {
        DataSource::Circles { n_train, n_test, noise } => Ok((
            make_concentric_circles(*n_train, *noise, seed)?,
            make_concentric_circles(*n_test, *noise, seed.wrapping_add(TEST_SEED_OFFSET))?,
        )),
        DataSource::Csv { train, test, label_column, num_classes } => {
            let schema = match num_classes {
                Some(k) => CsvSchema::classes(label_column, *k),
                None => CsvSchema::regression(label_column),
            };
            Ok((load_csv(&resolve(base, train), &schema)?, load_csv(&resolve(base, test), &schema)?))
        }
        DataSource::Idx {
            train_images,
            train_labels,
            test_images,
            test_labels,
            num_classes,
            fraction,
        } => {
            let mut train =
                load_idx(&resolve(base, train_images), &resolve(base, train_labels), *num_classes)?;
            if let Some(f) = fraction {
                train = stratified_subsample(&train, *f, seed)?;
            }
            let test = load_idx(&resolve(base, test_images), &resolve(base, test_labels), *num_classes)?;
            Ok((train, test))
        }
    }
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map_or(String::new(), |v| v.to_string())
}

/// Writes `arm,epoch,runs,<metric>_mean,<metric>_std,...` over seeds.
fn write_aggregate(path: &Path, runs: &[(String, Vec<Vec<MetricsRow>>)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "arm",
        "epoch",
        "runs",
        "train_loss_mean",
        "train_loss_std",
        "test_accuracy_mean",
        "test_accuracy_std",
        "deficit_mean",
        "deficit_std",
        "frobenius_norm_mean",
        "frobenius_norm_std",
    ])?;
    for (arm, seeds) in runs {
        let epochs = seeds.iter().map(Vec::len).max().unwrap_or(0);
        for e in 0..epochs {
            let rows: Vec<&MetricsRow> = seeds.iter().filter_map(|r| r.get(e)).collect();
            let col = |f: fn(&MetricsRow) -> f64| mean_std(&rows.iter().map(|r| f(r)).collect::<Vec<_>>());
            let acc: Vec<f64> = rows.iter().filter_map(|r| r.test_accuracy).collect();
            let (acc_m, acc_s) = if acc.is_empty() {
                (None, None)
            } else {
                let (m, s) = mean_std(&acc);
                (Some(m), Some(s))
            };
            let (l_m, l_s) = col(|r| r.train_loss);
            let (d_m, d_s) = col(|r| r.network_deficit);
            let (f_m, f_s) = col(|r| r.frobenius_norm);
            w.write_record([
                arm.clone(),
                rows[0].epoch.to_string(),
                rows.len().to_string(),
                l_m.to_string(),
                l_s.to_string(),
                fmt_opt(acc_m),
                fmt_opt(acc_s),
                d_m.to_string(),
                d_s.to_string(),
                f_m.to_string(),
                f_s.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

fn final_mean(runs: &[Vec<MetricsRow>], f: impl Fn(&MetricsRow) -> Option<f64>) -> Option<f64> {
    let xs: Vec<f64> = runs.iter().filter_map(|r| r.last().and_then(&f)).collect();
    (!xs.is_empty()).then(|| mean_std(&xs).0)
}

/// Trains every arm on every seed, writing `<arm>/seed-<s>/{metrics.csv,
/// network.json}`, `aggregate.csv` and `summary.json` under `out`.
///
/// A diverged run keeps its partial metrics and is listed in the summary;
/// the remaining runs still execute.
pub fn run_experiment(config: &ExperimentConfig, base: &Path, out: &Path) -> Result<ExperimentSummary> {
    let arms = if config.arms.is_empty() {
        vec![Arm {
            name: "default".into(),
            balance: config.train.balance.clone(),
            regularizer: None,
            no_regularizer: false,
        }]
    } else {
        config.arms.clone()
    };
    for (i, a) in arms.iter().enumerate() {
        if a.name.is_empty() || a.name.contains(['/', '\\']) || a.name.starts_with('.') {
            return Err(Error::TrainConfig(format!("arm name '{}' is not a directory name", a.name)));
        }
        if arms[..i].iter().any(|b| b.name == a.name) {
            return Err(Error::TrainConfig(format!("duplicate arm name '{}'", a.name)));
        }
    }
    let seeds = if config.seeds.is_empty() { vec![config.train.seed] } else { config.seeds.clone() };

    let mut all_runs = Vec::new();
    let mut summary = ExperimentSummary { arms: Vec::new() };
    for arm in &arms {
        let mut train_cfg = config.train.clone();
        train_cfg.balance = arm.balance.clone();
        if arm.no_regularizer {
            train_cfg.regularizer = None;
        }
        if let Some(r) = &arm.regularizer {
            train_cfg.regularizer = Some(r.clone());
        }
        train_cfg.validate()?;

        let mut runs = Vec::new();
        let mut diverged = Vec::new();
        for &seed in &seeds {
            let dir = out.join(&arm.name).join(format!("seed-{seed}"));
            fs::create_dir_all(&dir)?;
            let net = build_network(&config.network, base, seed)?;
            let (train, test) = load_data(&config.data, base, seed)?;
            train_cfg.seed = seed;
            let rows = match sgd_train(&net, &train, &test, &train_cfg) {
                Ok((trained, rows)) => {
                    fs::write(dir.join("network.json"), serialize(&trained)?)?;
                    rows
                }
                Err(Error::Diverged { epoch, metrics }) => {
                    eprintln!("arm {} seed {seed}: diverged at epoch {epoch}", arm.name);
                    diverged.push(seed);
                    metrics
                }
                Err(e) => return Err(e),
            };
            write_metrics_csv(&rows, fs::File::create(dir.join("metrics.csv"))?)?;
            runs.push(rows);
        }
        summary.arms.push(ArmSummary {
            name: arm.name.clone(),
            runs: runs.len(),
            diverged_seeds: diverged,
            final_train_loss_mean: final_mean(&runs, |r| Some(r.train_loss)),
            final_test_accuracy_mean: final_mean(&runs, |r| r.test_accuracy),
            final_deficit_mean: final_mean(&runs, |r| Some(r.network_deficit)),
        });
        all_runs.push((arm.name.clone(), runs));
    }
    write_aggregate(&out.join("aggregate.csv"), &all_runs)?;
    write_json(&out.join("summary.json"), &summary)?;
    Ok(summary)
}
