//! Minibatch SGD with optional weight costs and balancing between epochs.

mod data;
mod grad;

pub use data::{
    load_csv, load_idx, make_concentric_circles, parse_idx, read_csv, read_idx,
    stratified_subsample, write_csv, CsvSchema, Dataset, IdxArray, Targets,
};
pub use grad::{dataset_loss, gradients, Gradients, Loss, Regularization};

use std::io;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::balancing::{network_deficit, partial_balance_pass, run_balancing, Schedule};
use crate::error::{Error, Result};
use crate::netgraph::{Network, Role, UnitId};
use crate::regularizer::CostSpec;
use grad::{batch_gradients, check_trainable, Backprop};

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum BalanceMode {
    #[default]
    None,
    /// Balance to convergence once, before epoch 0.
    FullAtStart { tol: f64, cost: CostSpec },
    /// One pass over the hidden units, input side first, after every epoch.
    PartialEachEpoch { cost: CostSpec },
    /// Balance to convergence after every epoch.
    FullEachEpoch { tol: f64, cost: CostSpec },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub loss: Loss,
    #[serde(default)]
    pub regularizer: Option<Regularization>,
    #[serde(default)]
    pub balance: BalanceMode,
    #[serde(default)]
    pub seed: u64,
    /// Stop early once the full-batch objective gradient has ∞-norm below this.
    #[serde(default)]
    pub grad_tol: Option<f64>,
}

impl TrainConfig {
    pub fn new(learning_rate: f64, batch_size: usize, epochs: usize, loss: Loss) -> Self {
        TrainConfig {
            learning_rate,
            batch_size,
            epochs,
            loss,
            regularizer: None,
            balance: BalanceMode::None,
            seed: 0,
            grad_tol: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::TrainConfig(format!(
                "learning_rate must be non-negative, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::TrainConfig("batch_size must be at least 1".into()));
        }
        if let Some(r) = &self.regularizer {
            if !(r.coefficient >= 0.0) {
                return Err(Error::TrainConfig(format!(
                    "regularizer coefficient must be non-negative, got {}",
                    r.coefficient
                )));
            }
        }
        match &self.balance {
            BalanceMode::FullAtStart { tol, .. } | BalanceMode::FullEachEpoch { tol, .. }
                if !(*tol > 0.0) =>
            {
                Err(Error::TrainConfig(format!("balance tol must be positive, got {tol}")))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub epoch: usize,
    pub train_loss: f64,
    /// `None` for regression targets or an empty test set.
    pub test_accuracy: Option<f64>,
    /// L2 network deficit.
    #[serde(rename = "deficit")]
    pub network_deficit: f64,
    pub frobenius_norm: f64,
}

/// Writes `epoch,train_loss,test_accuracy,deficit,frobenius_norm`.
pub fn write_metrics_csv<W: io::Write>(rows: &[MetricsRow], w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    for r in rows {
        wr.serialize(r)?;
    }
    wr.flush()?;
    Ok(())
}

pub fn frobenius_norm(net: &Network) -> f64 {
    net.edges().iter().map(|e| e.weight * e.weight).sum::<f64>().sqrt()
}

/// `‖incoming‖₂ / ‖outgoing‖₂` for each hidden unit.
pub fn neuron_norm_ratios(net: &Network) -> Vec<(UnitId, f64)> {
    let norm = |ks: &[usize]| ks.iter().map(|&k| net.edges()[k].weight.powi(2)).sum::<f64>().sqrt();
    net.hidden_units()
        .into_iter()
        .map(|u| (u, norm(net.in_edge_indices(u)) / norm(net.out_edge_indices(u))))
        .collect()
}

/// Fraction of rows classified correctly: argmax over outputs, or a 0.5
/// threshold for a single output. `None` without class labels.
pub fn accuracy(net: &Network, data: &Dataset) -> Result<Option<f64>> {
    let Some(labels) = data.labels() else {
        return Ok(None);
    };
    if data.is_empty() {
        return Ok(None);
    }
    let mut bp = Backprop::new(net)?;
    let mut hits = 0usize;
    for (x, &l) in data.inputs.iter().zip(labels) {
        let y = bp.forward(net, x);
        let pred = if y.len() == 1 {
            usize::from(y[0] >= 0.5)
        } else {
            y.iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .map_or(0, |(k, _)| k)
        };
        hits += usize::from(pred == l);
    }
    Ok(Some(hits as f64 / data.len() as f64))
}

fn metrics(
    bp: &mut Backprop,
    net: &Network,
    train: &Dataset,
    test: &Dataset,
    loss: Loss,
    epoch: usize,
) -> Result<MetricsRow> {
    let all: Vec<usize> = (0..train.len()).collect();
    let train_loss = batch_gradients(bp, net, train, &all, loss, None)?.data_loss;
    Ok(MetricsRow {
        epoch,
        train_loss,
        test_accuracy: accuracy(net, test)?,
        network_deficit: network_deficit(net, &CostSpec::l2()),
        frobenius_norm: frobenius_norm(net),
    })
}

fn balance(net: &Network, mode: &BalanceMode, seed: u64, at_start: bool) -> Result<Option<Network>> {
    let full = |tol: f64, cost: &CostSpec| -> Result<Option<Network>> {
        let (out, _) = run_balancing(net, &Schedule::stochastic(seed).with_tol(tol), cost)?;
        Ok(Some(out))
    };
    match (mode, at_start) {
        (BalanceMode::FullAtStart { tol, cost }, true) => full(*tol, cost),
        (BalanceMode::FullEachEpoch { tol, cost }, false) => full(*tol, cost),
        (BalanceMode::PartialEachEpoch { cost }, false) => {
            Ok(Some(partial_balance_pass(net, cost, None)?.0))
        }
        _ => Ok(None),
    }
}

/// Trains `net` on `train`, recording a [`MetricsRow`] for the starting state
/// (epoch 0) and after every epoch.
pub fn sgd_train(
    net: &Network,
    train: &Dataset,
    test: &Dataset,
    config: &TrainConfig,
) -> Result<(Network, Vec<MetricsRow>)> {
    config.validate()?;
    check_trainable(net, config.regularizer.as_ref())?;
    if train.is_empty() {
        return Err(Error::TrainConfig("training set is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut bp = Backprop::new(net)?;
    let mut net = net.clone();
    if let Some(b) = balance(&net, &config.balance, config.seed, true)? {
        net = b;
    }
    let mut rows = vec![metrics(&mut bp, &net, train, test, config.loss, 0)?];
    let mut order: Vec<usize> = (0..train.len()).collect();
    let all = order.clone();
    let mut weights = net.weights();
    for epoch in 1..=config.epochs {
        if let Some(tol) = config.grad_tol {
            let g = batch_gradients(&mut bp, &net, train, &all, config.loss, config.regularizer.as_ref())?;
            if g.max_abs() < tol {
                break;
            }
        }
        order.shuffle(&mut rng);
        for batch in order.chunks(config.batch_size) {
            let g = batch_gradients(&mut bp, &net, train, batch, config.loss, config.regularizer.as_ref())?;
            for (w, d) in weights.iter_mut().zip(&g.weights) {
                *w -= config.learning_rate * d;
            }
            net.set_weights(&weights);
        }
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::Diverged { epoch, metrics: rows });
        }
        if let Some(b) = balance(&net, &config.balance, config.seed.wrapping_add(epoch as u64), false)? {
            net = b;
            weights = net.weights();
        }
        let row = metrics(&mut bp, &net, train, test, config.loss, epoch)?;
        if !row.train_loss.is_finite() {
            return Err(Error::Diverged { epoch, metrics: rows });
        }
        rows.push(row);
    }
    Ok((net, rows))
}

/// Hidden units whose in/out L2 norm ratio is off from 1 by more than `tol`.
pub fn unbalanced_units(net: &Network, tol: f64) -> Vec<UnitId> {
    neuron_norm_ratios(net)
        .into_iter()
        .filter(|&(u, r)| net.units()[u].role == Role::Hidden && (r - 1.0).abs() > tol)
        .map(|(u, _)| u)
        .collect()
}
