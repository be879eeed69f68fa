//! Self-consistent log-multiplier configurations and the convex oracle.
//!
//! Any sequence of scalings multiplies edge `j → i` by `Λ_i / Λ_j^{c_j}`, with
//! `Λ = 1` on visible and non-homogeneous units. Writing
//! `L_ij = log Λ_i - c_j·log Λ_j`, the reachable configurations form a linear
//! space cut out by path constraints (and cycle constraints in recurrent
//! nets). Minimizing the cost over that space is strictly convex; its unique
//! minimizer is the state every fair balancing schedule converges to.

mod convex;
mod uniqueness;

pub use convex::{solve_convex, OracleReport, OracleSolution};
pub use uniqueness::{verify_uniqueness, UniquenessReport};

use std::collections::VecDeque;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::netgraph::{Network, Role, UnitId};

const CONSISTENCY_TOL: f64 = 1e-9;

/// `Λ_i` per unit id.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MultiplierAssignment {
    pub lambda_per_unit: Vec<f64>,
}

impl MultiplierAssignment {
    pub fn identity(n: usize) -> Self {
        MultiplierAssignment {
            lambda_per_unit: vec![1.0; n],
        }
    }
}

/// `L` per edge, aligned with [`Network::edges`]. Entries on zero-weight
/// edges are ignored.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SelfConsistentConfig {
    pub l_per_edge: Vec<f64>,
}

impl SelfConsistentConfig {
    pub fn zeros(net: &Network) -> Self {
        SelfConsistentConfig {
            l_per_edge: vec![0.0; net.edges().len()],
        }
    }

    /// The configuration induced by per-unit multipliers.
    pub fn from_multipliers(net: &Network, m: &MultiplierAssignment) -> Self {
        let l_per_edge = net
            .edges()
            .iter()
            .map(|e| m.lambda_per_unit[e.to].ln() - exponent(net, e.from) * m.lambda_per_unit[e.from].ln())
            .collect();
        SelfConsistentConfig { l_per_edge }
    }

    pub fn get(&self, net: &Network, from: UnitId, to: UnitId) -> Option<f64> {
        net.edge_index(from, to).map(|k| self.l_per_edge[k])
    }

    /// `t·self + (1 - t)·other`.
    pub fn lerp(&self, other: &Self, t: f64) -> Self {
        SelfConsistentConfig {
            l_per_edge: self
                .l_per_edge
                .iter()
                .zip(&other.l_per_edge)
                .map(|(a, b)| t * a + (1.0 - t) * b)
                .collect(),
        }
    }

    /// Multiplies each edge weight by `exp(L)`.
    pub fn apply(&self, net: &Network) -> Network {
        let mut out = net.clone();
        let w: Vec<f64> = net
            .weights()
            .iter()
            .zip(&self.l_per_edge)
            .map(|(w, l)| w * l.exp())
            .collect();
        out.set_weights(&w);
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Constraint {
    /// Units from a source (input or bias) to an output along nonzero edges.
    Path(Vec<UnitId>),
    /// Units `v0, ..., vk` with edges `v0 → v1 → ... → vk → v0`.
    Cycle(Vec<UnitId>),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Consistency {
    Consistent(MultiplierAssignment),
    Conflict { unit: UnitId, message: String },
}

impl Consistency {
    pub fn is_consistent(&self) -> bool {
        matches!(self, Consistency::Consistent(_))
    }
}

/// Homogeneity exponent of a free unit; 1 for pinned units, whose log-multiplier is 0.
fn exponent(net: &Network, u: UnitId) -> f64 {
    let unit = &net.units()[u];
    if unit.role == Role::Hidden {
        unit.activation.homogeneity_exponent().unwrap_or(1.0)
    } else {
        1.0
    }
}

/// Units whose multiplier is fixed at 1.
pub(crate) fn is_pinned(net: &Network, u: UnitId) -> bool {
    let unit = &net.units()[u];
    unit.role != Role::Hidden || !unit.activation.is_homogeneous()
}

/// Hidden units not on any source-to-output path of nonzero edges.
pub(crate) fn unidentifiable(net: &Network) -> Option<UnitId> {
    let on_path = net.on_visible_path(true);
    net.hidden_units().into_iter().find(|&u| !on_path[u])
}

fn bfs_path(net: &Network, start: UnitId, forward: bool, goal: impl Fn(UnitId) -> bool) -> Option<Vec<UnitId>> {
    let mut prev = vec![usize::MAX; net.num_units()];
    let mut seen = vec![false; net.num_units()];
    let mut queue = VecDeque::from([start]);
    seen[start] = true;
    while let Some(u) = queue.pop_front() {
        if u != start && goal(u) {
            let mut path = vec![u];
            let mut cur = u;
            while cur != start {
                cur = prev[cur];
                path.push(cur);
            }
            if forward {
                path.reverse();
            }
            return Some(path);
        }
        let list = if forward {
            net.out_edge_indices(u)
        } else {
            net.in_edge_indices(u)
        };
        for &k in list {
            let e = &net.edges()[k];
            if e.weight == 0.0 {
                continue;
            }
            let v = if forward { e.to } else { e.from };
            if !seen[v] {
                seen[v] = true;
                prev[v] = u;
                queue.push_back(v);
            }
        }
    }
    None
}

/// A representative constraint set: one source-to-output path through every
/// hidden unit, plus (recurrent nets) one cycle per non-tree edge of each
/// strongly connected component.
pub fn enumerate_constraints(net: &Network) -> Result<Vec<Constraint>> {
    if let Some(u) = unidentifiable(net) {
        return Err(Error::Unidentifiable(u));
    }
    let mut covered = vec![false; net.num_units()];
    let mut out = Vec::new();
    for u in net.hidden_units() {
        if covered[u] {
            continue;
        }
        let back = bfs_path(net, u, false, |v| net.units()[v].role.is_source())
            .ok_or(Error::Unidentifiable(u))?;
        let fwd = bfs_path(net, u, true, |v| net.units()[v].role == Role::Output)
            .ok_or(Error::Unidentifiable(u))?;
        let mut path = back;
        path.extend_from_slice(&fwd[1..]);
        for &v in &path {
            covered[v] = true;
        }
        out.push(Constraint::Path(path));
    }
    if net.recurrent() {
        out.extend(cycle_basis(net).into_iter().map(Constraint::Cycle));
    }
    Ok(out)
}

fn cycle_basis(net: &Network) -> Vec<Vec<UnitId>> {
    let mut graph = petgraph::graph::DiGraph::<(), ()>::new();
    let nodes: Vec<_> = (0..net.num_units()).map(|_| graph.add_node(())).collect();
    for e in net.edges().iter().filter(|e| e.weight != 0.0) {
        graph.add_edge(nodes[e.from], nodes[e.to], ());
    }
    let mut comps: Vec<Vec<UnitId>> = petgraph::algo::tarjan_scc(&graph)
        .into_iter()
        .filter(|c| c.len() > 1)
        .map(|c| {
            let mut ids: Vec<UnitId> = c.into_iter().map(|n| n.index()).collect();
            ids.sort_unstable();
            ids
        })
        .collect();
    comps.sort();
    let mut cycles = Vec::new();
    for comp in comps {
        let mut member = vec![false; net.num_units()];
        for &u in &comp {
            member[u] = true;
        }
        let intra: Vec<(UnitId, UnitId)> = net
            .edges()
            .iter()
            .filter(|e| e.weight != 0.0 && member[e.from] && member[e.to])
            .map(|e| (e.from, e.to))
            .collect();
        // DFS spanning tree from the smallest member.
        let mut in_tree = vec![false; net.num_units()];
        let mut tree_edges = Vec::new();
        let mut stack = vec![comp[0]];
        in_tree[comp[0]] = true;
        while let Some(u) = stack.pop() {
            for &(a, b) in intra.iter().filter(|(a, _)| *a == u) {
                if !in_tree[b] {
                    in_tree[b] = true;
                    tree_edges.push((a, b));
                    stack.push(b);
                }
            }
        }
        for &(u, v) in &intra {
            if tree_edges.contains(&(u, v)) {
                continue;
            }
            // cycle: shortest path v ⇝ u inside the component, closed by u → v
            if let Some(path) = bfs_within(net, &member, v, u) {
                cycles.push(path);
            }
        }
    }
    cycles
}

fn bfs_within(net: &Network, member: &[bool], start: UnitId, goal: UnitId) -> Option<Vec<UnitId>> {
    if start == goal {
        return Some(vec![start]);
    }
    let mut prev = vec![usize::MAX; net.num_units()];
    let mut queue = VecDeque::from([start]);
    prev[start] = start;
    while let Some(u) = queue.pop_front() {
        for &k in net.out_edge_indices(u) {
            let e = &net.edges()[k];
            if e.weight == 0.0 || !member[e.to] || prev[e.to] != usize::MAX {
                continue;
            }
            prev[e.to] = u;
            if e.to == goal {
                let mut path = vec![goal];
                let mut cur = goal;
                while cur != start {
                    cur = prev[cur];
                    path.push(cur);
                }
                path.reverse();
                return Some(path);
            }
            queue.push_back(e.to);
        }
    }
    None
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= CONSISTENCY_TOL * a.abs().max(b.abs()).max(1.0)
}

/// Recovers `Λ` from `L` by propagating `log Λ_i = L_ij + c_j·log Λ_j` out
/// of the pinned units, then checks every nonzero edge.
pub fn is_self_consistent(l: &SelfConsistentConfig, net: &Network) -> Consistency {
    let n = net.num_units();
    let mut log_l: Vec<Option<f64>> = vec![None; n];
    let mut queue = VecDeque::new();
    for u in 0..n {
        if is_pinned(net, u) {
            log_l[u] = Some(0.0);
            queue.push_back(u);
        }
    }
    let conflict = |unit: UnitId, have: f64, want: f64| Consistency::Conflict {
        unit,
        message: format!("log-multiplier of unit {unit} is {have} along one path and {want} along another"),
    };
    while let Some(u) = queue.pop_front() {
        let x = log_l[u].expect("queued units are assigned");
        for &k in net.out_edge_indices(u) {
            let e = &net.edges()[k];
            if e.weight == 0.0 {
                continue;
            }
            let want = l.l_per_edge[k] + exponent(net, u) * x;
            match log_l[e.to] {
                None => {
                    log_l[e.to] = Some(want);
                    queue.push_back(e.to);
                }
                Some(have) if !close(have, want) => return conflict(e.to, have, want),
                _ => {}
            }
        }
        for &k in net.in_edge_indices(u) {
            let e = &net.edges()[k];
            if e.weight == 0.0 {
                continue;
            }
            let want = (x - l.l_per_edge[k]) / exponent(net, e.from);
            match log_l[e.from] {
                None => {
                    log_l[e.from] = Some(want);
                    queue.push_back(e.from);
                }
                Some(have) if !close(have, want) => return conflict(e.from, have, want),
                _ => {}
            }
        }
    }
    Consistency::Consistent(MultiplierAssignment {
        lambda_per_unit: log_l.into_iter().map(|x| x.unwrap_or(0.0).exp()).collect(),
    })
}

/// Residual of each constraint under `l`: the log-multiplier reached at the
/// end of a path (or at a pinned unit on it), and for cycles whose exponents
/// multiply to 1, the accumulated offset around the loop.
pub fn constraint_residuals(
    l: &SelfConsistentConfig,
    net: &Network,
    constraints: &[Constraint],
) -> Vec<f64> {
    let l_of = |a: UnitId, b: UnitId| {
        net.edge_index(a, b)
            .map(|k| l.l_per_edge[k])
            .expect("constraint follows existing edges")
    };
    constraints
        .iter()
        .map(|c| match c {
            Constraint::Path(p) => {
                let mut x = 0.0;
                let mut worst: f64 = 0.0;
                for w in p.windows(2) {
                    x = l_of(w[0], w[1]) + exponent(net, w[0]) * x;
                    if is_pinned(net, w[1]) {
                        worst = worst.max(x.abs());
                        x = 0.0;
                    }
                }
                worst
            }
            Constraint::Cycle(cyc) => {
                // around the loop x ↦ C·x + K
                let (mut gain, mut offset) = (1.0, 0.0);
                for k in 0..cyc.len() {
                    let (a, b) = (cyc[k], cyc[(k + 1) % cyc.len()]);
                    let c = exponent(net, a);
                    gain *= c;
                    offset = l_of(a, b) + c * offset;
                }
                if close(gain, 1.0) {
                    offset.abs()
                } else {
                    0.0
                }
            }
        })
        .collect()
}

/// `L_ij = log(w_final / w_initial)` per edge.
pub fn project_balancing_run(final_net: &Network, initial: &Network) -> Result<SelfConsistentConfig> {
    if final_net.num_units() != initial.num_units() || final_net.edges().len() != initial.edges().len() {
        return Err(Error::TopologyMismatch(format!(
            "{} units / {} edges vs {} units / {} edges",
            final_net.num_units(),
            final_net.edges().len(),
            initial.num_units(),
            initial.edges().len()
        )));
    }
    let mut l_per_edge = Vec::with_capacity(initial.edges().len());
    for (a, b) in initial.edges().iter().zip(final_net.edges()) {
        if (a.from, a.to) != (b.from, b.to) {
            return Err(Error::TopologyMismatch(format!(
                "edge {} -> {} vs {} -> {}",
                a.from, a.to, b.from, b.to
            )));
        }
        let flipped = a.weight.signum() != b.weight.signum() || (a.weight == 0.0) != (b.weight == 0.0);
        if flipped {
            return Err(Error::SignFlip {
                from: a.from,
                to: a.to,
                initial: a.weight,
                last: b.weight,
            });
        }
        l_per_edge.push(if a.weight == 0.0 { 0.0 } else { (b.weight / a.weight).ln() });
    }
    Ok(SelfConsistentConfig { l_per_edge })
}

/// Applies `Λ` to a network: edge `j → i` is multiplied by `Λ_i / Λ_j^{c_j}`.
pub fn apply_multipliers(net: &Network, m: &MultiplierAssignment) -> Result<Network> {
    if m.lambda_per_unit.len() != net.num_units() {
        return Err(Error::DimensionMismatch {
            expected: net.num_units(),
            got: m.lambda_per_unit.len(),
        });
    }
    for (u, &x) in m.lambda_per_unit.iter().enumerate() {
        if !(x > 0.0 && x.is_finite()) {
            return Err(Error::NonPositiveLambda(x));
        }
        if is_pinned(net, u) && x != 1.0 {
            return Err(Error::NotScalable {
                unit: u,
                reason: "multiplier of a pinned unit must be 1",
            });
        }
    }
    Ok(SelfConsistentConfig::from_multipliers(net, m).apply(net))
}

/// Tied-layer balance of a linear chain of `N` weight matrices under L2.
///
/// `squared_norms[i] = ‖A_i‖²`. Returns the factors `M_i` with `Π M_i = 1`
/// that equalize `‖M_i A_i‖²`, namely `M_i = (Π_k s_k)^{1/(2N)} / √s_i`.
pub fn tied_layer_closed_form(squared_norms: &[f64]) -> Result<Vec<f64>> {
    if squared_norms.is_empty() {
        return Err(Error::TiedLayer("need at least one layer".into()));
    }
    if let Some((k, &s)) = squared_norms
        .iter()
        .enumerate()
        .find(|(_, s)| !(**s > 0.0 && s.is_finite()))
    {
        return Err(Error::TiedLayer(format!("norm of layer {k} is {s}, must be positive")));
    }
    let n = squared_norms.len() as f64;
    let mean_log = squared_norms.iter().map(|s| s.ln()).sum::<f64>() / (2.0 * n);
    Ok(squared_norms
        .iter()
        .map(|s| (mean_log - 0.5 * s.ln()).exp())
        .collect())
}
