//! Many seeded stochastic balancing runs against each other and the oracle.

use std::thread;

use serde::Serialize;

use super::solve_convex;
use crate::balancing::{run_balancing, Schedule};
use crate::error::{Error, Result};
use crate::netgraph::Network;
use crate::regularizer::CostSpec;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UniquenessReport {
    pub seeds: Vec<u64>,
    /// Max over run pairs and edges of `|a - b| / max(1, |a|, |b|)`.
    pub max_pairwise_discrepancy: f64,
    /// Max over run pairs of `‖W_a - W_b‖_F / ‖W‖_F`.
    pub max_pairwise_frobenius: f64,
    /// Max over runs and edges of the elementwise discrepancy to the oracle;
    /// `None` when the cost has several terms.
    pub max_oracle_discrepancy: Option<f64>,
    pub r_initial: f64,
    pub r_final_min: f64,
    pub r_final_max: f64,
    pub r_star: Option<f64>,
    pub max_steps_taken: usize,
    pub note: Option<String>,
}

impl UniquenessReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_pairwise_discrepancy < tol && self.max_oracle_discrepancy.is_none_or(|d| d < tol)
    }
}

pub(crate) fn elementwise(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1.0))
        .fold(0.0, f64::max)
}

fn frobenius_gap(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Balances `net` once per seed under the stochastic schedule and compares
/// the final weights pairwise and against the convex oracle. Runs are spread
/// over the available cores; results do not depend on the thread count.
pub fn verify_uniqueness(
    net: &Network,
    cost: &CostSpec,
    seeds: &[u64],
    tol: f64,
    max_steps: usize,
) -> Result<(UniquenessReport, Vec<Network>)> {
    let r_initial = crate::regularizer::network_cost(net, cost);
    if net.balanceable_units().is_empty() {
        let report = UniquenessReport {
            seeds: seeds.to_vec(),
            max_pairwise_discrepancy: 0.0,
            max_pairwise_frobenius: 0.0,
            max_oracle_discrepancy: Some(0.0),
            r_initial,
            r_final_min: r_initial,
            r_final_max: r_initial,
            r_star: Some(r_initial),
            max_steps_taken: 0,
            note: Some("nothing to balance: no hidden homogeneous units".into()),
        };
        return Ok((report, vec![net.clone(); seeds.len()]));
    }

    let workers = thread::available_parallelism().map_or(1, |n| n.get()).min(seeds.len().max(1));
    let chunk = seeds.len().div_ceil(workers).max(1);
    let results: Vec<Result<(Network, f64, usize)>> = thread::scope(|s| {
        let handles: Vec<_> = seeds
            .chunks(chunk)
            .map(|part| {
                s.spawn(move || {
                    part.iter()
                        .map(|&seed| {
                            let sched = Schedule::stochastic(seed).with_tol(tol).with_max_steps(max_steps);
                            let (out, trace) = run_balancing(net, &sched, cost)?;
                            if !trace.converged {
                                return Err(Error::BalancingNotConverged {
                                    seed,
                                    steps: trace.steps.len(),
                                    residual: trace.residual,
                                });
                            }
                            Ok((out, trace.r_final(), trace.steps.len()))
                        })
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("balancing worker panicked"))
            .collect()
    });
    let mut nets = Vec::with_capacity(seeds.len());
    let mut r_final = Vec::with_capacity(seeds.len());
    let mut max_steps_taken = 0;
    for r in results {
        let (n, r, steps) = r?;
        nets.push(n);
        r_final.push(r);
        max_steps_taken = max_steps_taken.max(steps);
    }

    let weights: Vec<Vec<f64>> = nets.iter().map(Network::weights).collect();
    let scale = weights[0].iter().map(|w| w * w).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
    let mut max_pairwise_discrepancy: f64 = 0.0;
    let mut max_pairwise_frobenius: f64 = 0.0;
    for i in 0..weights.len() {
        for j in i + 1..weights.len() {
            max_pairwise_discrepancy = max_pairwise_discrepancy.max(elementwise(&weights[i], &weights[j]));
            max_pairwise_frobenius = max_pairwise_frobenius.max(frobenius_gap(&weights[i], &weights[j]) / scale);
        }
    }
    let (max_oracle_discrepancy, r_star, note) = if cost.single_term().is_some() {
        let sol = solve_convex(net, cost)?;
        let target = sol.balanced_network(net).weights();
        let d = weights.iter().map(|w| elementwise(w, &target)).fold(0.0, f64::max);
        (Some(d), Some(sol.r_star), None)
    } else {
        (None, None, Some("oracle skipped: cost has several terms".to_string()))
    };
    let report = UniquenessReport {
        seeds: seeds.to_vec(),
        max_pairwise_discrepancy,
        max_pairwise_frobenius,
        max_oracle_discrepancy,
        r_initial,
        r_final_min: r_final.iter().cloned().fold(f64::INFINITY, f64::min),
        r_final_max: r_final.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        r_star,
        max_steps_taken,
        note,
    };
    Ok((report, nets))
}
