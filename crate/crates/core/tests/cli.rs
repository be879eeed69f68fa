use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use balancekit::netgraph::{deserialize, serialize};
use balancekit::{ActivationSpec, Edge, Network, Role, Unit};
use serde_json::Value;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_balancekit"));
    c.env_remove("BALANCEKIT_SEED");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn balancekit")
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

fn small_net(dir: &Path) -> String {
    let relu = ActivationSpec::RELU;
    let units = vec![
        Unit::new(0, Role::Input, ActivationSpec::IDENTITY),
        Unit::new(1, Role::Hidden, relu),
        Unit::new(2, Role::Hidden, relu),
        Unit::new(3, Role::Output, ActivationSpec::IDENTITY),
    ];
    let edges = vec![
        Edge::new(0, 1, 3.0),
        Edge::new(0, 2, -0.2),
        Edge::new(1, 3, 0.1),
        Edge::new(2, 3, 4.0),
    ];
    let net = Network::new(units, edges, false, 1).unwrap();
    let p = dir.join("net.json");
    fs::write(&p, serialize(&net).unwrap()).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn balance_writes_outputs_and_preserves_function() {
    let dir = tempfile::tempdir().unwrap();
    let net = small_net(dir.path());
    let out = dir.path().join("b");
    let o = run(&["balance", "--net", &net, "--schedule", "sequential", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["balanced.json", "trace.csv", "summary.json", "manifest.json"] {
        assert!(out.join(f).exists(), "missing {f}");
    }
    let summary = read_json(&out.join("summary.json"));
    assert_eq!(summary["converged"], true);
    assert!(summary["r_after"].as_f64().unwrap() < summary["r_before"].as_f64().unwrap());
    let before = deserialize(&fs::read_to_string(&net).unwrap()).unwrap();
    let after = deserialize(&fs::read_to_string(out.join("balanced.json")).unwrap()).unwrap();
    for x in [-1.5, 0.3, 2.0] {
        let (a, b) = (before.forward(&[x]).unwrap()[0], after.forward(&[x]).unwrap()[0]);
        assert!((a - b).abs() <= 1e-12 * (1.0 + a.abs()), "{a} vs {b}");
    }
    let manifest = read_json(&out.join("manifest.json"));
    assert_eq!(manifest["command"], "balance");
    assert_eq!(manifest["settings"]["cost"], "l2");
}

#[test]
fn bad_cost_token_exits_1_and_names_it() {
    let dir = tempfile::tempdir().unwrap();
    let net = small_net(dir.path());
    let o = run(&["balance", "--net", &net, "--cost", "l2+bogus", "--out", dir.path().join("x").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("bogus"));
}

#[test]
fn step_budget_exhaustion_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let net = small_net(dir.path());
    let out = dir.path().join("b");
    let o = run(&["balance", "--net", &net, "--max-steps", "1", "--tol", "1e-30", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(read_json(&out.join("summary.json"))["converged"], false);
}

#[test]
fn usage_errors_exit_1_and_help_exits_0() {
    assert_eq!(run(&["--help"]).status.code(), Some(0));
    assert_eq!(run(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(run(&["balance"]).status.code(), Some(1));
    assert_eq!(run(&["balance", "--net", "/nonexistent/net.json", "--out", "/tmp/x"]).status.code(), Some(1));
}

#[test]
fn env_seed_overrides_stochastic_seed() {
    let dir = tempfile::tempdir().unwrap();
    let net = small_net(dir.path());
    let trace = |seed_env: Option<&str>, schedule: &str, name: &str| {
        let out = dir.path().join(name);
        let mut c = bin();
        if let Some(s) = seed_env {
            c.env("BALANCEKIT_SEED", s);
        }
        let o = c
            .args(["balance", "--net", &net, "--schedule", schedule, "--out", out.to_str().unwrap()])
            .output()
            .unwrap();
        assert_eq!(o.status.code(), Some(0));
        fs::read_to_string(out.join("trace.csv")).unwrap()
    };
    assert_eq!(trace(Some("9"), "stochastic:1", "a"), trace(None, "stochastic:9", "b"));
    assert_eq!(trace(None, "stochastic:4", "c"), trace(None, "stochastic:4", "d"));
    assert_ne!(trace(None, "stochastic:4", "e"), trace(None, "stochastic:5", "f"));
}

#[test]
fn generate_then_oracle_and_uniqueness_agree() {
    let dir = tempfile::tempdir().unwrap();
    let g = dir.path().join("g");
    let o = run(&["generate", "--widths", "3,4,3,2", "--bias", "--seed", "2", "--out", g.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    let net = g.join("network.json");
    let or = dir.path().join("o");
    assert_eq!(run(&["oracle", "--net", net.to_str().unwrap(), "--out", or.to_str().unwrap()]).status.code(), Some(0));
    let u = dir.path().join("u");
    let o = run(&[
        "verify-uniqueness", "--net", net.to_str().unwrap(), "--seeds", "3,1,4,1,5", "--out", u.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let rep = read_json(&u.join("uniqueness.json"));
    let oracle = read_json(&or.join("oracle.json"));
    let (r_star, r_min) = (oracle["r_star"].as_f64().unwrap(), rep["r_final_min"].as_f64().unwrap());
    assert!((r_star - r_min).abs() <= 1e-9 * r_star);
    assert!(rep["max_pairwise_discrepancy"].as_f64().unwrap() <= 1e-6);
}

#[test]
fn approx_reports_interpolation_error() {
    let dir = tempfile::tempdir().unwrap();
    let samples = dir.path().join("s.csv");
    let mut text = String::from("x,y\n");
    for k in 0..=20 {
        let x = k as f64 / 20.0;
        text.push_str(&format!("{x},{}\n", (3.0 * x).sin()));
    }
    fs::write(&samples, text).unwrap();
    let out = dir.path().join("a");
    let o = run(&["approx", "--samples", samples.to_str().unwrap(), "--epsilon", "0.2", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let rep = read_json(&out.join("report.json"));
    assert_eq!(rep["slices"], 20);
    assert!(rep["max_interpolation_error"].as_f64().unwrap() < 1e-12);

    let o = run(&["approx", "--samples", samples.to_str().unwrap(), "--epsilon", "0.1", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
}

fn write_config(dir: &Path, lr: f64, epochs: usize) -> std::path::PathBuf {
    let cfg = serde_json::json!({
        "network": {"generate": {"widths": [2, 5, 1], "output": "logistic"}},
        "data": {"circles": {"n_train": 60, "n_test": 40, "noise": 0.05}},
        "train": {"learning_rate": lr, "batch_size": 8, "epochs": epochs, "loss": "binary_cross_entropy"},
        "arms": [
            {"name": "plain"},
            {"name": "balanced", "balance": {"mode": "full_at_start", "tol": 1e-10, "cost": "l2"}}
        ],
        "seeds": [0, 1],
        "out": "runs"
    });
    let p = dir.join("exp.json");
    fs::write(&p, cfg.to_string()).unwrap();
    p
}

#[test]
fn train_writes_per_arm_and_aggregate_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), 0.2, 3);
    let o = run(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let runs = dir.path().join("runs");
    for arm in ["plain", "balanced"] {
        for seed in [0, 1] {
            let d = runs.join(arm).join(format!("seed-{seed}"));
            let metrics = fs::read_to_string(d.join("metrics.csv")).unwrap();
            assert_eq!(metrics.lines().count(), 1 + 4);
            assert!(d.join("network.json").exists());
        }
    }
    let agg = fs::read_to_string(runs.join("aggregate.csv")).unwrap();
    assert_eq!(agg.lines().count(), 1 + 2 * 4);
    assert!(agg.lines().nth(1).unwrap().starts_with("plain,0,2,"));
    assert!(runs.join("manifest.json").exists());

    // The balanced arm starts from the balanced version of the same network.
    let first_deficit = |arm: &str| -> f64 {
        let m = fs::read_to_string(runs.join(arm).join("seed-0/metrics.csv")).unwrap();
        m.lines().nth(1).unwrap().split(',').nth(3).unwrap().parse().unwrap()
    };
    assert!(first_deficit("balanced") < 1e-6);
    assert!(first_deficit("plain") > first_deficit("balanced"));
}

#[test]
fn train_seed_flag_and_zero_epochs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), 0.2, 0);
    let out = dir.path().join("elsewhere");
    let o = run(&["train", "--config", cfg.to_str().unwrap(), "--seeds", "7", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    let m = fs::read_to_string(out.join("plain/seed-7/metrics.csv")).unwrap();
    assert_eq!(m.lines().count(), 2);
    assert!(!out.join("plain/seed-0").exists());
}

#[test]
fn divergence_exits_2_and_keeps_partial_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = serde_json::json!({
        "network": {"generate": {"widths": [2, 8, 8, 1]}},
        "data": {"circles": {"n_train": 40, "n_test": 10}},
        "train": {"learning_rate": 1e6, "batch_size": 40, "epochs": 50, "loss": "squared_error"},
        "seeds": [0],
        "out": "runs"
    });
    let p = dir.path().join("exp.json");
    fs::write(&p, cfg.to_string()).unwrap();
    let o = run(&["train", "--config", p.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));
    let m = fs::read_to_string(dir.path().join("runs/default/seed-0/metrics.csv")).unwrap();
    assert!(m.lines().count() >= 2);
    let summary = read_json(&dir.path().join("runs/summary.json"));
    assert_eq!(summary["arms"][0]["diverged_seeds"][0], 0);
}

#[test]
fn train_rejects_unknown_config_fields() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("exp.json");
    fs::write(&p, r#"{"network": {"path": "n.json"}, "data": {"circles": {"n_train": 4, "n_test": 4}},
        "train": {"learning_rate": 0.1, "batch_size": 1, "epochs": 1, "loss": "squared_error"}, "out": "r", "extra": 1}"#)
        .unwrap();
    assert_eq!(run(&["train", "--config", p.to_str().unwrap()]).status.code(), Some(1));
}
