//! Iterated balancing under a schedule.
//!
//! The engine keeps per-unit side sums of the cost's balance measure so each
//! step touches only the balanced unit and its neighbours. The cost `R` is
//! tracked incrementally through the per-step decrease.

use std::io;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{solve_lambda, tied_sides, BalanceReport};
use crate::error::{Error, Result};
use crate::netgraph::{Network, Role, UnitId};
use crate::regularizer::{network_cost, CostSpec};

/// Default stop threshold on the normalized deficit.
pub const DEFAULT_DEFICIT_TOL: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub enum ScheduleKind {
    /// Uniform draws with replacement from the balanceable units.
    Stochastic { seed: u64 },
    /// Cycle through the given order.
    Sequential { order: Vec<UnitId> },
    /// Layers in turn; units within a layer are balanced independently.
    LayerIndependent { layers: Vec<Vec<UnitId>> },
    /// Layers in turn, each with one shared factor.
    LayerTied { layers: Vec<Vec<UnitId>> },
    /// Repeated passes in topological order, input side first.
    PartialPass,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StopCriteria {
    /// Stop once `deficit / R_initial²` drops below this.
    pub deficit_tol: f64,
    /// Hard cap on unit (or group) balancing steps.
    pub max_steps: usize,
}

impl Default for StopCriteria {
    fn default() -> Self {
        StopCriteria {
            deficit_tol: DEFAULT_DEFICIT_TOL,
            max_steps: 1_000_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    pub kind: ScheduleKind,
    pub stop: StopCriteria,
    /// Balance tanh/logistic units as if `c = 1`. Changes the function.
    pub allow_nonhomogeneous: bool,
}

impl Schedule {
    pub fn new(kind: ScheduleKind) -> Self {
        Schedule {
            kind,
            stop: StopCriteria::default(),
            allow_nonhomogeneous: false,
        }
    }

    pub fn stochastic(seed: u64) -> Self {
        Self::new(ScheduleKind::Stochastic { seed })
    }

    pub fn sequential(order: Vec<UnitId>) -> Self {
        Self::new(ScheduleKind::Sequential { order })
    }

    pub fn with_tol(mut self, deficit_tol: f64) -> Self {
        self.stop.deficit_tol = deficit_tol;
        self
    }

    pub fn with_max_steps(mut self, max_steps: usize) -> Self {
        self.stop.max_steps = max_steps;
        self
    }

    pub fn allow_nonhomogeneous(mut self, allow: bool) -> Self {
        self.allow_nonhomogeneous = allow;
        self
    }
}

/// A schedule named independently of any particular network:
/// `stochastic:<seed>`, `sequential`, `layer`, `layer-tied` or `partial`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleSpec {
    Stochastic(u64),
    /// Reverse topological order, output side first.
    Sequential,
    Layer,
    LayerTied,
    Partial,
}

impl FromStr for ScheduleSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sequential" => Ok(ScheduleSpec::Sequential),
            "layer" => Ok(ScheduleSpec::Layer),
            "layer-tied" => Ok(ScheduleSpec::LayerTied),
            "partial" => Ok(ScheduleSpec::Partial),
            _ => match s.strip_prefix("stochastic:") {
                Some(seed) => seed.parse().map(ScheduleSpec::Stochastic).map_err(|_| {
                    Error::Schedule(format!("bad stochastic seed '{seed}'"))
                }),
                None => Err(Error::Schedule(format!(
                    "unknown schedule '{s}' (expected stochastic:<seed>, sequential, layer, layer-tied or partial)"
                ))),
            },
        }
    }
}

impl ScheduleSpec {
    pub fn with_seed(self, seed: u64) -> Self {
        match self {
            ScheduleSpec::Stochastic(_) => ScheduleSpec::Stochastic(seed),
            other => other,
        }
    }

    /// Fills in unit orders and layers from `net`.
    pub fn resolve(self, net: &Network) -> Result<Schedule> {
        let kind = match self {
            ScheduleSpec::Stochastic(seed) => ScheduleKind::Stochastic { seed },
            ScheduleSpec::Sequential => {
                let mut order = order_of(net)?;
                order.retain(|&u| net.units()[u].role == Role::Hidden);
                order.reverse();
                ScheduleKind::Sequential { order }
            }
            ScheduleSpec::Layer => ScheduleKind::LayerIndependent {
                layers: layers_of(net)?,
            },
            ScheduleSpec::LayerTied => ScheduleKind::LayerTied {
                layers: layers_of(net)?,
            },
            ScheduleSpec::Partial => ScheduleKind::PartialPass,
        };
        Ok(Schedule::new(kind))
    }
}

fn order_of(net: &Network) -> Result<Vec<UnitId>> {
    if net.recurrent() {
        Ok((0..net.num_units()).collect())
    } else {
        net.topological_order()
    }
}

fn layers_of(net: &Network) -> Result<Vec<Vec<UnitId>>> {
    if net.recurrent() {
        return Err(Error::Schedule(
            "layer schedules need a feedforward network".into(),
        ));
    }
    net.hidden_layers()
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct BalanceTrace {
    pub steps: Vec<BalanceReport>,
    /// `R` before any step, then after each step.
    pub r_series: Vec<f64>,
    /// Network deficit before any step, then after each step.
    pub deficit_series: Vec<f64>,
    pub r_initial: f64,
    /// Final value of the stop residual (normalized deficit).
    pub residual: f64,
    pub converged: bool,
    /// Units left alone because one side carries no nonzero weight.
    pub skipped: Vec<UnitId>,
}

#[derive(Serialize)]
struct CsvRow {
    step: usize,
    unit: UnitId,
    lambda_star: f64,
    delta_r: f64,
    r_after: f64,
    deficit_after: f64,
}

impl BalanceTrace {
    pub fn r_final(&self) -> f64 {
        *self.r_series.last().unwrap_or(&self.r_initial)
    }

    /// Columns `step,unit,lambda_star,delta_r,r_after,deficit_after`.
    pub fn write_csv<W: io::Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        for (k, s) in self.steps.iter().enumerate() {
            wr.serialize(CsvRow {
                step: k + 1,
                unit: s.unit,
                lambda_star: s.lambda_star,
                delta_r: s.delta_r,
                r_after: s.r_after,
                deficit_after: self.deficit_series[k + 1],
            })?;
        }
        wr.flush()?;
        Ok(())
    }
}

struct Engine<'a> {
    net: &'a Network,
    cost: &'a CostSpec,
    weights: Vec<f64>,
    exponent: Vec<f64>,
    active: Vec<bool>,
    in_m: Vec<f64>,
    out_m: Vec<f64>,
    r: f64,
    r0: f64,
    buf_in: Vec<f64>,
    buf_out: Vec<f64>,
}

impl<'a> Engine<'a> {
    fn new(net: &'a Network, cost: &'a CostSpec, allow_nonhomogeneous: bool) -> Self {
        let n = net.num_units();
        let mut exponent = vec![1.0; n];
        let mut scalable = vec![false; n];
        for u in net.units() {
            if u.role != Role::Hidden {
                continue;
            }
            match u.activation.homogeneity_exponent() {
                Some(c) => {
                    exponent[u.id] = c;
                    scalable[u.id] = true;
                }
                None => scalable[u.id] = allow_nonhomogeneous,
            }
        }
        let r0 = network_cost(net, cost);
        let mut e = Engine {
            net,
            cost,
            weights: net.weights(),
            exponent,
            active: scalable,
            in_m: vec![0.0; n],
            out_m: vec![0.0; n],
            r: r0,
            r0,
            buf_in: Vec::new(),
            buf_out: Vec::new(),
        };
        for u in 0..n {
            e.refresh(u);
        }
        e
    }

    /// Scalable units with a zero side: excluded from the residual.
    fn drop_degenerate(&mut self) -> Vec<UnitId> {
        let mut skipped = Vec::new();
        for u in 0..self.active.len() {
            if self.active[u] && (self.in_m[u] == 0.0 || self.out_m[u] == 0.0) {
                self.active[u] = false;
                skipped.push(u);
            }
        }
        skipped
    }

    fn refresh(&mut self, u: UnitId) {
        let m = |ks: &[usize]| -> f64 {
            ks.iter()
                .map(|&k| self.cost.balance_measure(self.weights[k]))
                .sum()
        };
        self.in_m[u] = m(self.net.in_edge_indices(u));
        self.out_m[u] = m(self.net.out_edge_indices(u));
    }

    fn unit_deficit(&self, u: UnitId) -> f64 {
        (self.in_m[u] - self.exponent[u] * self.out_m[u]).powi(2)
    }

    fn deficit(&self) -> f64 {
        (0..self.active.len())
            .filter(|&u| self.active[u])
            .map(|u| self.unit_deficit(u))
            .sum()
    }

    fn tied_deficit(&self, layers: &[Vec<UnitId>]) -> f64 {
        layers
            .iter()
            .map(|l| {
                let live: Vec<UnitId> = l.iter().copied().filter(|&u| self.active[u]).collect();
                let a: f64 = live.iter().map(|&u| self.in_m[u]).sum();
                let b: f64 = live.iter().map(|&u| self.exponent[u] * self.out_m[u]).sum();
                (a - b).powi(2)
            })
            .sum()
    }

    fn normalize(&self, d: f64) -> f64 {
        if self.r0 > 0.0 {
            d / (self.r0 * self.r0)
        } else {
            0.0
        }
    }

    /// Balances `units` with one factor. Returns `None` for an all-inactive group.
    fn step(&mut self, units: &[UnitId]) -> Result<Option<BalanceReport>> {
        let units: Vec<UnitId> = units.iter().copied().filter(|&u| self.active[u]).collect();
        let Some(&first) = units.first() else {
            return Ok(None);
        };
        let c = self.exponent[first];
        self.buf_in.clear();
        self.buf_out.clear();
        let mut local_before = 0.0;
        for &u in &units {
            for &k in self.net.in_edge_indices(u) {
                let w = self.weights[k];
                local_before += self.cost.weight_cost(w);
                if w != 0.0 {
                    self.buf_in.push(w);
                }
            }
            for &k in self.net.out_edge_indices(u) {
                let w = self.weights[k];
                local_before += self.cost.weight_cost(w);
                if w != 0.0 {
                    self.buf_out.push(w);
                }
            }
        }
        let lambda = solve_lambda(first, &self.buf_in, &self.buf_out, c, self.cost)?;
        let out_factor = lambda.powf(-c);
        let mut local_after = 0.0;
        for &u in &units {
            for &k in self.net.in_edge_indices(u) {
                self.weights[k] *= lambda;
                local_after += self.cost.weight_cost(self.weights[k]);
            }
            for &k in self.net.out_edge_indices(u) {
                self.weights[k] *= out_factor;
                local_after += self.cost.weight_cost(self.weights[k]);
            }
        }
        for &u in &units {
            self.refresh(u);
            for &k in self.net.in_edge_indices(u) {
                self.refresh(self.net.edges()[k].from);
            }
            for &k in self.net.out_edge_indices(u) {
                self.refresh(self.net.edges()[k].to);
            }
        }
        let delta_r = (local_before - local_after).max(0.0);
        let r_before = self.r;
        self.r -= delta_r;
        Ok(Some(BalanceReport {
            unit: first,
            lambda_star: lambda,
            r_before,
            r_after: self.r,
            delta_r,
        }))
    }

    fn into_network(self) -> Network {
        let mut out = self.net.clone();
        out.set_weights(&self.weights);
        out
    }
}

fn check_units(net: &Network, units: &[UnitId], active: &[bool], allow: bool) -> Result<()> {
    for &u in units {
        let unit = net.unit(u)?;
        if unit.role != Role::Hidden {
            return Err(Error::NotScalable {
                unit: u,
                reason: "visible units are pinned",
            });
        }
        if !active[u] && !allow && !unit.activation.is_homogeneous() {
            return Err(Error::NotScalable {
                unit: u,
                reason: "activation is not homogeneous",
            });
        }
    }
    Ok(())
}

fn check_no_internal_edges(net: &Network, layer: &[UnitId]) -> Result<()> {
    for &u in layer {
        for e in net.out_edges(u)? {
            if layer.contains(&e.to) {
                return Err(Error::Schedule(format!(
                    "layer {layer:?}: edge {u} -> {} joins two members",
                    e.to
                )));
            }
        }
    }
    Ok(())
}

/// Runs balancing steps under `schedule` until the normalized deficit drops
/// below the tolerance or the step budget is spent.
pub fn run_balancing(
    net: &Network,
    schedule: &Schedule,
    cost: &CostSpec,
) -> Result<(Network, BalanceTrace)> {
    let mut eng = Engine::new(net, cost, schedule.allow_nonhomogeneous);
    let scalable = eng.active.clone();
    let skipped = eng.drop_degenerate();

    // Flattened sequence of groups, cycled until the stop criterion holds.
    let (groups, tied_layers): (Vec<Vec<UnitId>>, Option<&[Vec<UnitId>]>) = match &schedule.kind {
        ScheduleKind::Stochastic { .. } => (Vec::new(), None),
        ScheduleKind::Sequential { order } => {
            check_units(net, order, &scalable, schedule.allow_nonhomogeneous)?;
            (order.iter().map(|&u| vec![u]).collect(), None)
        }
        ScheduleKind::LayerIndependent { layers } => {
            for l in layers {
                check_units(net, l, &scalable, schedule.allow_nonhomogeneous)?;
                check_no_internal_edges(net, l)?;
            }
            (layers.iter().flatten().map(|&u| vec![u]).collect(), None)
        }
        ScheduleKind::LayerTied { layers } => {
            for l in layers {
                check_units(net, l, &scalable, schedule.allow_nonhomogeneous)?;
                tied_sides(net, l, schedule.allow_nonhomogeneous)
                    .map_err(|e| Error::Schedule(format!("layer {l:?}: {e}")))?;
            }
            (layers.clone(), Some(layers.as_slice()))
        }
        ScheduleKind::PartialPass => (
            order_of(net)?
                .into_iter()
                .filter(|&u| eng.active[u])
                .map(|u| vec![u])
                .collect(),
            None,
        ),
    };
    let pool: Vec<UnitId> = (0..net.num_units()).filter(|&u| eng.active[u]).collect();
    let mut rng = match schedule.kind {
        ScheduleKind::Stochastic { seed } => Some(ChaCha8Rng::seed_from_u64(seed)),
        _ => None,
    };

    let residual = |eng: &Engine, d: f64| match tied_layers {
        Some(layers) => eng.normalize(eng.tied_deficit(layers)),
        None => eng.normalize(d),
    };

    let d0 = eng.deficit();
    let mut trace = BalanceTrace {
        r_initial: eng.r0,
        r_series: vec![eng.r0],
        deficit_series: vec![d0],
        residual: residual(&eng, d0),
        skipped,
        ..Default::default()
    };
    let has_work = match &rng {
        Some(_) => !pool.is_empty(),
        None => groups.iter().flatten().any(|&u| eng.active[u]),
    };
    let mut cursor = 0;
    while trace.residual >= schedule.stop.deficit_tol
        && trace.steps.len() < schedule.stop.max_steps
        && has_work
    {
        let group = match rng.as_mut() {
            Some(rng) => vec![pool[rng.random_range(0..pool.len())]],
            None => {
                let g = groups[cursor % groups.len()].clone();
                cursor += 1;
                g
            }
        };
        let Some(rep) = eng.step(&group)? else {
            continue;
        };
        let d = eng.deficit();
        trace.steps.push(rep);
        trace.r_series.push(eng.r);
        trace.deficit_series.push(d);
        trace.residual = residual(&eng, d);
    }
    trace.converged = trace.residual < schedule.stop.deficit_tol;
    Ok((eng.into_network(), trace))
}

/// Balances every hidden homogeneous unit once, in `order` if given and in
/// topological order (input side first) otherwise.
pub fn partial_balance_pass(
    net: &Network,
    cost: &CostSpec,
    order: Option<&[UnitId]>,
) -> Result<(Network, BalanceTrace)> {
    let mut eng = Engine::new(net, cost, false);
    let skipped = eng.drop_degenerate();
    let order = match order {
        Some(o) => {
            check_units(net, o, &eng.active, false)?;
            o.to_vec()
        }
        None => order_of(net)?,
    };
    let d0 = eng.deficit();
    let mut trace = BalanceTrace {
        r_initial: eng.r0,
        r_series: vec![eng.r0],
        deficit_series: vec![d0],
        skipped,
        ..Default::default()
    };
    for u in order {
        if let Some(rep) = eng.step(&[u])? {
            trace.steps.push(rep);
            trace.r_series.push(eng.r);
            trace.deficit_series.push(eng.deficit());
        }
    }
    trace.residual = eng.normalize(*trace.deficit_series.last().expect("nonempty"));
    trace.converged = trace.residual < DEFAULT_DEFICIT_TOL;
    Ok((eng.into_network(), trace))
}
