//! Command-line front end.
//!
//! Exit codes: 0 success, 1 usage / I/O / validation errors, 2 a run that
//! did not converge or diverged. Every command writes `manifest.json` into
//! its output directory with the arguments and resolved settings.

mod experiment;

pub use experiment::{
    run_experiment, Arm, DataSource, ExperimentConfig, ExperimentSummary, NetworkSource,
};

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::json;

use crate::activations::{construct_universal_approximator, ActivationSpec};
use crate::balancing::{network_deficit, run_balancing, ScheduleSpec, DEFAULT_DEFICIT_TOL};
use crate::error::{Error, Result};
use crate::manifold::{solve_convex, verify_uniqueness};
use crate::netgraph::{deserialize, serialize, LayeredNet, Network};
use crate::regularizer::CostSpec;

/// Environment variable that overrides the seed of any command.
pub const SEED_ENV: &str = "BALANCEKIT_SEED";

#[derive(Debug, Parser)]
#[command(name = "balancekit", version, about = "Balance, verify and train networks of homogeneous units")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Balance a network under a schedule.
    Balance(BalanceArgs),
    /// Balance with many stochastic seeds and compare against the convex oracle.
    VerifyUniqueness(UniquenessArgs),
    /// Run a training experiment from a JSON config.
    Train(TrainArgs),
    /// Build the one-hidden-layer ReLU interpolant of sampled function values.
    Approx(ApproxArgs),
    /// Solve for the balanced state directly.
    Oracle(OracleArgs),
    /// Write a randomly initialized layered network.
    Generate(GenerateArgs),
}

#[derive(Debug, Args)]
pub struct BalanceArgs {
    #[arg(long)]
    pub net: PathBuf,
    #[arg(long, default_value = "l2")]
    pub cost: String,
    /// stochastic:<seed> | sequential | layer | layer-tied | partial
    #[arg(long, default_value = "stochastic:0")]
    pub schedule: String,
    #[arg(long, default_value_t = DEFAULT_DEFICIT_TOL)]
    pub tol: f64,
    #[arg(long, default_value_t = 1_000_000)]
    pub max_steps: usize,
    /// Also balance tanh and logistic units (changes the network function).
    #[arg(long)]
    pub allow_nonhomogeneous: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct UniquenessArgs {
    #[arg(long)]
    pub net: PathBuf,
    #[arg(long, default_value = "l2")]
    pub cost: String,
    #[arg(long, default_value_t = 10)]
    pub n_schedules: usize,
    /// Explicit seeds; otherwise `n_schedules` consecutive seeds from the base seed.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1e-24)]
    pub tol: f64,
    #[arg(long, default_value_t = 10_000_000)]
    pub max_steps: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the config's output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Overrides the config's seed list.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
}

#[derive(Debug, Args)]
pub struct ApproxArgs {
    /// CSV with columns x,y at the knots k/N.
    #[arg(long)]
    pub samples: PathBuf,
    #[arg(long)]
    pub epsilon: f64,
    /// Expected number of slices; checked against the sample count.
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long, default_value_t = 10_000)]
    pub grid: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct OracleArgs {
    #[arg(long)]
    pub net: PathBuf,
    #[arg(long, default_value = "l2")]
    pub cost: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// Layer widths, input first, e.g. 3,5,4,2.
    #[arg(long, value_delimiter = ',', required = true)]
    pub widths: Vec<usize>,
    #[arg(long, default_value = "relu")]
    pub hidden: String,
    #[arg(long, default_value = "identity")]
    pub output: String,
    #[arg(long)]
    pub bias: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

/// How a command finished when it did not fail outright.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Success,
    NotConverged,
}

impl Outcome {
    pub fn exit_code(self) -> i32 {
        match self {
            Outcome::Success => 0,
            Outcome::NotConverged => 2,
        }
    }
}

pub fn exit_code_for(err: &Error) -> i32 {
    match err {
        Error::Diverged { .. }
        | Error::BalancingNotConverged { .. }
        | Error::SolverNonConvergence { .. } => 2,
        _ => 1,
    }
}

/// Parses `argv` (program name first), runs the command, and returns the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let argv: Vec<String> = argv.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    match execute(&cli.command, &argv) {
        Ok(outcome) => outcome.exit_code(),
        Err(e) => {
            eprintln!("error: {e}");
            exit_code_for(&e)
        }
    }
}

pub fn execute(command: &Command, argv: &[String]) -> Result<Outcome> {
    match command {
        Command::Balance(a) => cmd_balance(a, argv),
        Command::VerifyUniqueness(a) => cmd_verify_uniqueness(a, argv),
        Command::Train(a) => cmd_train(a, argv),
        Command::Approx(a) => cmd_approx(a, argv),
        Command::Oracle(a) => cmd_oracle(a, argv),
        Command::Generate(a) => cmd_generate(a, argv),
    }
}

/// `BALANCEKIT_SEED`, if set.
pub fn env_seed() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Error::TrainConfig(format!("{SEED_ENV}='{v}' is not an unsigned integer"))),
        Err(_) => Ok(None),
    }
}

pub(crate) fn read_network(path: &Path) -> Result<Network> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Document(format!("cannot read {}: {e}", path.display())))?;
    deserialize(&text)
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Document(e.to_string()))?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

#[derive(Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    command: &'a str,
    argv: &'a [String],
    seed_env: Option<u64>,
    settings: serde_json::Value,
    outputs: Vec<String>,
}

pub(crate) fn write_manifest(
    out: &Path,
    command: &str,
    argv: &[String],
    settings: serde_json::Value,
    outputs: &[&str],
) -> Result<()> {
    let manifest = Manifest {
        tool: env!("CARGO_PKG_NAME"),
        version: env!("CARGO_PKG_VERSION"),
        command,
        argv,
        seed_env: env_seed()?,
        settings,
        outputs: outputs.iter().map(|s| s.to_string()).collect(),
    };
    write_json(&out.join("manifest.json"), &manifest)
}

pub fn cmd_balance(a: &BalanceArgs, argv: &[String]) -> Result<Outcome> {
    let net = read_network(&a.net)?;
    let cost: CostSpec = a.cost.parse()?;
    let mut spec: ScheduleSpec = a.schedule.parse()?;
    if let Some(seed) = env_seed()? {
        spec = spec.with_seed(seed);
    }
    let schedule = spec
        .resolve(&net)?
        .with_tol(a.tol)
        .with_max_steps(a.max_steps)
        .allow_nonhomogeneous(a.allow_nonhomogeneous);
    let (balanced, trace) = run_balancing(&net, &schedule, &cost)?;

    fs::create_dir_all(&a.out)?;
    fs::write(a.out.join("balanced.json"), serialize(&balanced)?)?;
    trace.write_csv(fs::File::create(a.out.join("trace.csv"))?)?;
    let summary = json!({
        "r_before": trace.r_initial,
        "r_after": trace.r_final(),
        "steps": trace.steps.len(),
        "productive_steps": trace.steps.iter().filter(|s| s.delta_r > 0.0).count(),
        "final_deficit": network_deficit(&balanced, &cost),
        "residual": trace.residual,
        "converged": trace.converged,
        "skipped_units": trace.skipped,
    });
    write_json(&a.out.join("summary.json"), &summary)?;
    write_manifest(
        &a.out,
        "balance",
        argv,
        json!({
            "net": a.net,
            "cost": cost.to_string(),
            "schedule": format!("{spec:?}"),
            "tol": a.tol,
            "max_steps": a.max_steps,
            "allow_nonhomogeneous": a.allow_nonhomogeneous,
        }),
        &["balanced.json", "trace.csv", "summary.json"],
    )?;
    println!(
        "R {} -> {} in {} steps; converged: {}",
        trace.r_initial,
        trace.r_final(),
        trace.steps.len(),
        trace.converged
    );
    Ok(if trace.converged { Outcome::Success } else { Outcome::NotConverged })
}

pub fn cmd_verify_uniqueness(a: &UniquenessArgs, argv: &[String]) -> Result<Outcome> {
    let net = read_network(&a.net)?;
    let cost: CostSpec = a.cost.parse()?;
    let seeds: Vec<u64> = match &a.seeds {
        Some(s) => s.clone(),
        None => {
            let base = env_seed()?.unwrap_or(a.seed);
            (0..a.n_schedules as u64).map(|k| base.wrapping_add(k)).collect()
        }
    };
    if seeds.len() < 2 {
        return Err(Error::Schedule(format!("need at least 2 schedules, got {}", seeds.len())));
    }
    fs::create_dir_all(&a.out)?;
    let settings = json!({
        "net": a.net, "cost": cost.to_string(), "seeds": seeds, "tol": a.tol, "max_steps": a.max_steps,
    });
    write_manifest(&a.out, "verify-uniqueness", argv, settings.clone(), &["uniqueness.json"])?;
    let (report, _) = verify_uniqueness(&net, &cost, &seeds, a.tol, a.max_steps)?;
    write_json(&a.out.join("uniqueness.json"), &report)?;
    let pass = report.passes(1e-6);
    println!(
        "{} runs: max pairwise discrepancy {:e}, max oracle discrepancy {}{}",
        seeds.len(),
        report.max_pairwise_discrepancy,
        report.max_oracle_discrepancy.map_or("n/a".into(), |d| format!("{d:e}")),
        report.note.as_ref().map_or(String::new(), |n| format!(" ({n})")),
    );
    Ok(if pass { Outcome::Success } else { Outcome::NotConverged })
}

pub fn cmd_train(a: &TrainArgs, argv: &[String]) -> Result<Outcome> {
    let text = fs::read_to_string(&a.config)
        .map_err(|e| Error::TrainConfig(format!("cannot read {}: {e}", a.config.display())))?;
    let mut config: ExperimentConfig =
        serde_json::from_str(&text).map_err(|e| Error::TrainConfig(e.to_string()))?;
    if let Some(seed) = env_seed()? {
        config.train.seed = seed;
        config.seeds = vec![seed];
    }
    if let Some(seeds) = &a.seeds {
        config.seeds = seeds.clone();
    }
    let base = a.config.parent().map(Path::to_path_buf).unwrap_or_default();
    let out = match (&a.out, &config.out) {
        (Some(o), _) => o.clone(),
        (None, Some(o)) => base.join(o),
        (None, None) => return Err(Error::TrainConfig("no output directory (--out or \"out\")".into())),
    };
    fs::create_dir_all(&out)?;
    write_manifest(
        &out,
        "train",
        argv,
        serde_json::to_value(&config).map_err(|e| Error::Document(e.to_string()))?,
        &["aggregate.csv", "summary.json"],
    )?;
    let summary = run_experiment(&config, &base, &out)?;
    for arm in &summary.arms {
        println!(
            "{}: {} runs, final test accuracy {}, diverged seeds {:?}",
            arm.name,
            arm.runs,
            arm.final_test_accuracy_mean.map_or("n/a".into(), |x| format!("{x:.4}")),
            arm.diverged_seeds
        );
    }
    Ok(if summary.arms.iter().any(|a| !a.diverged_seeds.is_empty()) {
        Outcome::NotConverged
    } else {
        Outcome::Success
    })
}

fn read_samples(path: &Path) -> Result<Vec<(f64, f64)>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let headers = rdr.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::Dataset(format!("{}: no column named '{name}'", path.display())))
    };
    let (xi, yi) = (col("x")?, col("y")?);
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        let num = |k: usize| -> Result<f64> {
            rec.get(k)
                .and_then(|s| s.trim().parse().ok())
                .ok_or_else(|| Error::CsvRow { line, message: format!("field {k} is not a number") })
        };
        out.push((num(xi)?, num(yi)?));
    }
    Ok(out)
}

pub fn cmd_approx(a: &ApproxArgs, argv: &[String]) -> Result<Outcome> {
    let samples = read_samples(&a.samples)?;
    if let Some(n) = a.n {
        if samples.len() != n + 1 {
            return Err(Error::Approximator(format!(
                "--n {n} needs {} knots, the file has {}",
                n + 1,
                samples.len()
            )));
        }
    }
    let approx = construct_universal_approximator(&samples, a.epsilon)?;
    let max_err = approx.max_interpolation_error(&samples, a.grid)?;
    fs::create_dir_all(&a.out)?;
    fs::write(a.out.join("network.json"), serialize(&approx.net)?)?;
    write_json(
        &a.out.join("report.json"),
        &json!({
            "slices": approx.slices,
            "epsilon": a.epsilon,
            "max_slice_jump": approx.max_slice_jump,
            "grid_points": a.grid + 1,
            "max_interpolation_error": max_err,
            "output_weights": approx.output_weights,
        }),
    )?;
    write_manifest(
        &a.out,
        "approx",
        argv,
        json!({"samples": a.samples, "epsilon": a.epsilon, "n": a.n, "grid": a.grid}),
        &["network.json", "report.json"],
    )?;
    println!("{} slices, max grid error vs interpolant {max_err:e}", approx.slices);
    Ok(Outcome::Success)
}

pub fn cmd_oracle(a: &OracleArgs, argv: &[String]) -> Result<Outcome> {
    let net = read_network(&a.net)?;
    let cost: CostSpec = a.cost.parse()?;
    let sol = solve_convex(&net, &cost)?;
    fs::create_dir_all(&a.out)?;
    write_json(&a.out.join("oracle.json"), &sol.report)?;
    fs::write(a.out.join("balanced.json"), serialize(&sol.balanced_network(&net))?)?;
    write_manifest(
        &a.out,
        "oracle",
        argv,
        json!({"net": a.net, "cost": cost.to_string()}),
        &["oracle.json", "balanced.json"],
    )?;
    println!("R* = {} after {} Newton steps", sol.r_star, sol.report.iterations);
    Ok(Outcome::Success)
}

pub fn cmd_generate(a: &GenerateArgs, argv: &[String]) -> Result<Outcome> {
    if a.widths.len() < 2 || a.widths.contains(&0) {
        return Err(Error::InvalidNetwork(format!(
            "widths {:?}: need at least two nonzero layers",
            a.widths
        )));
    }
    let hidden: ActivationSpec = a.hidden.parse()?;
    let output: ActivationSpec = a.output.parse()?;
    let seed = env_seed()?.unwrap_or(a.seed);
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
    let net = LayeredNet::new(&a.widths)
        .hidden(hidden)
        .output(output)
        .bias(a.bias)
        .build(&mut rng);
    fs::create_dir_all(&a.out)?;
    fs::write(a.out.join("network.json"), serialize(&net)?)?;
    write_manifest(
        &a.out,
        "generate",
        argv,
        json!({"widths": a.widths, "hidden": a.hidden, "output": a.output, "bias": a.bias, "seed": seed}),
        &["network.json"],
    )?;
    Ok(Outcome::Success)
}
