//! Networks of heterogeneous units over an arbitrary directed graph.
//!
//! Biases are ordinary edges leaving a bias-source unit clamped to one, so
//! they take part in scaling and balancing like any other weight.

mod document;
mod generate;

pub use document::{deserialize, serialize, DOCUMENT_VERSION};
pub use generate::{glorot_range, LayeredNet};

use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashMap, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::activations::ActivationSpec;
use crate::error::{Error, Result};

pub type UnitId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Input,
    Output,
    Hidden,
    #[serde(rename = "bias-source", alias = "bias")]
    Bias,
}

impl Role {
    /// Visible units keep their multiplier pinned to one.
    pub fn is_visible(self) -> bool {
        !matches!(self, Role::Hidden)
    }

    /// Units whose value is fixed from outside (inputs, and the bias clamped to one).
    pub fn is_source(self) -> bool {
        matches!(self, Role::Input | Role::Bias)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Unit {
    pub id: UnitId,
    pub role: Role,
    pub activation: ActivationSpec,
}

impl Unit {
    pub fn new(id: UnitId, role: Role, activation: ActivationSpec) -> Self {
        Unit { id, role, activation }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub from: UnitId,
    pub to: UnitId,
    pub weight: f64,
}

impl Edge {
    pub fn new(from: UnitId, to: UnitId, weight: f64) -> Self {
        Edge { from, to, weight }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    units: Vec<Unit>,
    edges: Vec<Edge>,
    recurrent: bool,
    unroll_steps: usize,
    // Edge indices per unit; incoming sorted by source id, outgoing by target id.
    incoming: Vec<Vec<usize>>,
    outgoing: Vec<Vec<usize>>,
    index: HashMap<(UnitId, UnitId), usize>,
}

/// A broken network invariant, naming the offending unit(s).
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    Cycle { units: Vec<UnitId> },
    NotOnPath { unit: UnitId },
    DeadSide { unit: UnitId, side: &'static str },
    SourceHasIncoming { unit: UnitId },
    RecurrentOutputHasOutgoing { unit: UnitId },
    BadActivation { unit: UnitId, message: String },
    MultipleBiasSources { units: Vec<UnitId> },
    ZeroUnroll,
    NonFiniteWeight { from: UnitId, to: UnitId },
}

impl Violation {
    /// Structural violations make evaluation meaningless; the others only
    /// matter for balancing.
    pub fn is_structural(&self) -> bool {
        !matches!(self, Violation::NotOnPath { .. } | Violation::DeadSide { .. })
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::Cycle { units } => {
                write!(f, "directed cycle through units {units:?} in a non-recurrent network")
            }
            Violation::NotOnPath { unit } => {
                write!(f, "hidden unit {unit} lies on no input-to-output path")
            }
            Violation::DeadSide { unit, side } => {
                write!(f, "hidden unit {unit} has no nonzero {side} weight")
            }
            Violation::SourceHasIncoming { unit } => {
                write!(f, "source unit {unit} has incoming edges")
            }
            Violation::RecurrentOutputHasOutgoing { unit } => {
                write!(f, "output unit {unit} of a recurrent network has outgoing edges")
            }
            Violation::BadActivation { unit, message } => write!(f, "unit {unit}: {message}"),
            Violation::MultipleBiasSources { units } => {
                write!(f, "more than one bias-source unit: {units:?}")
            }
            Violation::ZeroUnroll => write!(f, "recurrent network needs unroll_steps >= 1"),
            Violation::NonFiniteWeight { from, to } => {
                write!(f, "edge {from} -> {to} has a non-finite weight")
            }
        }
    }
}

impl Network {
    /// Builds a network, rejecting non-dense ids, dangling edges, self-loops
    /// and parallel edges. Everything else is reported by [`Network::validate`].
    pub fn new(
        units: Vec<Unit>,
        edges: Vec<Edge>,
        recurrent: bool,
        unroll_steps: usize,
    ) -> Result<Self> {
        for (position, u) in units.iter().enumerate() {
            if u.id != position {
                return Err(Error::NonDenseIds { position, found: u.id });
            }
        }
        let n = units.len();
        let mut incoming = vec![Vec::new(); n];
        let mut outgoing = vec![Vec::new(); n];
        let mut index = HashMap::with_capacity(edges.len());
        for (k, e) in edges.iter().enumerate() {
            if e.from >= n {
                return Err(Error::UnknownUnit(e.from));
            }
            if e.to >= n {
                return Err(Error::UnknownUnit(e.to));
            }
            if e.from == e.to {
                return Err(Error::SelfLoop(e.from));
            }
            if index.insert((e.from, e.to), k).is_some() {
                return Err(Error::DuplicateEdge { from: e.from, to: e.to });
            }
            incoming[e.to].push(k);
            outgoing[e.from].push(k);
        }
        for list in &mut incoming {
            list.sort_by_key(|&k| edges[k].from);
        }
        for list in &mut outgoing {
            list.sort_by_key(|&k| edges[k].to);
        }
        Ok(Network {
            units,
            edges,
            recurrent,
            unroll_steps,
            incoming,
            outgoing,
            index,
        })
    }

    pub fn units(&self) -> &[Unit] {
        &self.units
    }

    pub fn unit(&self, id: UnitId) -> Result<&Unit> {
        self.units.get(id).ok_or(Error::UnknownUnit(id))
    }

    pub fn num_units(&self) -> usize {
        self.units.len()
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn recurrent(&self) -> bool {
        self.recurrent
    }

    pub fn unroll_steps(&self) -> usize {
        self.unroll_steps
    }

    pub fn edge_index(&self, from: UnitId, to: UnitId) -> Option<usize> {
        self.index.get(&(from, to)).copied()
    }

    pub fn weights(&self) -> Vec<f64> {
        self.edges.iter().map(|e| e.weight).collect()
    }

    pub fn set_weight(&mut self, edge: usize, weight: f64) {
        self.edges[edge].weight = weight;
    }

    pub fn set_activation(&mut self, unit: UnitId, activation: ActivationSpec) -> Result<()> {
        activation.check()?;
        self.units.get_mut(unit).ok_or(Error::UnknownUnit(unit))?.activation = activation;
        Ok(())
    }

    /// Overwrites every weight, in edge-list order.
    pub fn set_weights(&mut self, weights: &[f64]) {
        assert_eq!(weights.len(), self.edges.len(), "weight vector length");
        for (e, &w) in self.edges.iter_mut().zip(weights) {
            e.weight = w;
        }
    }

    /// Indices into [`Network::edges`] of the edges entering `unit`, by source id.
    pub fn in_edge_indices(&self, unit: UnitId) -> &[usize] {
        &self.incoming[unit]
    }

    /// Indices into [`Network::edges`] of the edges leaving `unit`, by target id.
    pub fn out_edge_indices(&self, unit: UnitId) -> &[usize] {
        &self.outgoing[unit]
    }

    pub fn in_edges(&self, unit: UnitId) -> Result<Vec<Edge>> {
        self.unit(unit)?;
        Ok(self.incoming[unit].iter().map(|&k| self.edges[k]).collect())
    }

    pub fn out_edges(&self, unit: UnitId) -> Result<Vec<Edge>> {
        self.unit(unit)?;
        Ok(self.outgoing[unit].iter().map(|&k| self.edges[k]).collect())
    }

    fn ids_with(&self, pred: impl Fn(Role) -> bool) -> Vec<UnitId> {
        self.units.iter().filter(|u| pred(u.role)).map(|u| u.id).collect()
    }

    pub fn input_units(&self) -> Vec<UnitId> {
        self.ids_with(|r| r == Role::Input)
    }

    pub fn output_units(&self) -> Vec<UnitId> {
        self.ids_with(|r| r == Role::Output)
    }

    pub fn hidden_units(&self) -> Vec<UnitId> {
        self.ids_with(|r| r == Role::Hidden)
    }

    pub fn bias_unit(&self) -> Option<UnitId> {
        self.ids_with(|r| r == Role::Bias).first().copied()
    }

    pub fn is_visible(&self, unit: UnitId) -> bool {
        self.units[unit].role.is_visible()
    }

    /// Hidden units with a homogeneity exponent: the ones balancing acts on.
    pub fn balanceable_units(&self) -> Vec<UnitId> {
        self.units
            .iter()
            .filter(|u| u.role == Role::Hidden && u.activation.is_homogeneous())
            .map(|u| u.id)
            .collect()
    }

    /// Kahn's algorithm with smallest-id-first tie-breaking, so the order is
    /// unique. Fails on a cycle.
    pub fn topological_order(&self) -> Result<Vec<UnitId>> {
        let n = self.units.len();
        let mut indeg: Vec<usize> = self.incoming.iter().map(Vec::len).collect();
        let mut heap: BinaryHeap<Reverse<UnitId>> =
            (0..n).filter(|&u| indeg[u] == 0).map(Reverse).collect();
        let mut order = Vec::with_capacity(n);
        while let Some(Reverse(u)) = heap.pop() {
            order.push(u);
            for &k in &self.outgoing[u] {
                let v = self.edges[k].to;
                indeg[v] -= 1;
                if indeg[v] == 0 {
                    heap.push(Reverse(v));
                }
            }
        }
        if order.len() != n {
            return Err(Error::InvalidNetwork("graph has a directed cycle".into()));
        }
        Ok(order)
    }

    /// Hidden units grouped by longest-path depth from the sources. In a
    /// layered network these are the layers, input side first.
    pub fn hidden_layers(&self) -> Result<Vec<Vec<UnitId>>> {
        let order = self.topological_order()?;
        let mut depth = vec![0usize; self.units.len()];
        for &u in &order {
            for &k in &self.incoming[u] {
                depth[u] = depth[u].max(depth[self.edges[k].from] + 1);
            }
        }
        let mut layers: Vec<Vec<UnitId>> = Vec::new();
        for u in self.hidden_units() {
            let d = depth[u];
            if layers.len() < d {
                layers.resize(d, Vec::new());
            }
            layers[d - 1].push(u);
        }
        layers.retain(|l| !l.is_empty());
        Ok(layers)
    }

    fn reach(&self, starts: &[UnitId], forward: bool, nonzero_only: bool) -> Vec<bool> {
        let mut seen = vec![false; self.units.len()];
        let mut queue: VecDeque<UnitId> = starts.iter().copied().collect();
        for &s in starts {
            seen[s] = true;
        }
        while let Some(u) = queue.pop_front() {
            let list = if forward { &self.outgoing[u] } else { &self.incoming[u] };
            for &k in list {
                let e = &self.edges[k];
                if nonzero_only && e.weight == 0.0 {
                    continue;
                }
                let v = if forward { e.to } else { e.from };
                if !seen[v] {
                    seen[v] = true;
                    queue.push_back(v);
                }
            }
        }
        seen
    }

    /// Hidden units that are reachable from a source and reach an output.
    pub(crate) fn on_visible_path(&self, nonzero_only: bool) -> Vec<bool> {
        let sources = self.ids_with(Role::is_source);
        let outputs = self.output_units();
        let fwd = self.reach(&sources, true, nonzero_only);
        let bwd = self.reach(&outputs, false, nonzero_only);
        fwd.iter().zip(&bwd).map(|(a, b)| *a && *b).collect()
    }

    /// Every violated invariant; empty iff the network is valid.
    pub fn validate(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        if self.recurrent && self.unroll_steps == 0 {
            out.push(Violation::ZeroUnroll);
        }
        let biases = self.ids_with(|r| r == Role::Bias);
        if biases.len() > 1 {
            out.push(Violation::MultipleBiasSources { units: biases });
        }
        for e in &self.edges {
            if !e.weight.is_finite() {
                out.push(Violation::NonFiniteWeight { from: e.from, to: e.to });
            }
        }
        for u in &self.units {
            if let Err(err) = u.activation.check() {
                out.push(Violation::BadActivation {
                    unit: u.id,
                    message: err.to_string(),
                });
            }
            if u.role.is_source() && !self.incoming[u.id].is_empty() {
                out.push(Violation::SourceHasIncoming { unit: u.id });
            }
            if self.recurrent && u.role == Role::Output && !self.outgoing[u.id].is_empty() {
                out.push(Violation::RecurrentOutputHasOutgoing { unit: u.id });
            }
        }
        if !self.recurrent {
            for scc in self.cyclic_components() {
                out.push(Violation::Cycle { units: scc });
            }
        }
        let on_path = self.on_visible_path(false);
        for u in self.hidden_units() {
            if !on_path[u] {
                out.push(Violation::NotOnPath { unit: u });
            }
            let live = |list: &[usize]| list.iter().any(|&k| self.edges[k].weight != 0.0);
            if !live(&self.incoming[u]) {
                out.push(Violation::DeadSide { unit: u, side: "incoming" });
            }
            if !live(&self.outgoing[u]) {
                out.push(Violation::DeadSide { unit: u, side: "outgoing" });
            }
        }
        out
    }

    /// Strongly connected components containing a directed cycle, each sorted.
    pub(crate) fn cyclic_components(&self) -> Vec<Vec<UnitId>> {
        let graph = self.as_digraph();
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
        comps
    }

    pub(crate) fn as_digraph(&self) -> petgraph::graph::DiGraph<(), ()> {
        use petgraph::graph::NodeIndex;
        let mut g = petgraph::graph::DiGraph::with_capacity(self.units.len(), self.edges.len());
        for _ in &self.units {
            g.add_node(());
        }
        for e in &self.edges {
            g.add_edge(NodeIndex::new(e.from), NodeIndex::new(e.to), ());
        }
        g
    }

    fn ensure_evaluable(&self) -> Result<()> {
        if let Some(v) = self.validate().into_iter().find(Violation::is_structural) {
            return Err(Error::InvalidNetwork(v.to_string()));
        }
        Ok(())
    }

    /// Output-unit activations (ascending id) for one input vector (one value
    /// per input unit, ascending id).
    ///
    /// Feedforward nets are evaluated in topological order. Recurrent nets
    /// start from a zero hidden state, update all hidden units synchronously
    /// `unroll_steps` times, then read the outputs off the final state.
    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        self.ensure_evaluable()?;
        let inputs = self.input_units();
        if input.len() != inputs.len() {
            return Err(Error::DimensionMismatch {
                expected: inputs.len(),
                got: input.len(),
            });
        }
        if self.recurrent {
            Ok(self.forward_recurrent(&inputs, input))
        } else {
            let order = self.topological_order()?;
            Ok(self.forward_with_order(&order, &inputs, input))
        }
    }

    pub(crate) fn pre_activation(&self, unit: UnitId, values: &[f64]) -> f64 {
        self.incoming[unit]
            .iter()
            .map(|&k| {
                let e = &self.edges[k];
                e.weight * values[e.from]
            })
            .sum()
    }

    pub(crate) fn forward_with_order(
        &self,
        order: &[UnitId],
        inputs: &[UnitId],
        input: &[f64],
    ) -> Vec<f64> {
        let mut values = vec![0.0; self.units.len()];
        for (&u, &x) in inputs.iter().zip(input) {
            values[u] = x;
        }
        for &u in order {
            match self.units[u].role {
                Role::Input => {}
                Role::Bias => values[u] = 1.0,
                Role::Hidden | Role::Output => {
                    let z = self.pre_activation(u, &values);
                    values[u] = self.units[u].activation.activate(z);
                }
            }
        }
        self.output_units().iter().map(|&u| values[u]).collect()
    }

    fn forward_recurrent(&self, inputs: &[UnitId], input: &[f64]) -> Vec<f64> {
        let mut values = vec![0.0; self.units.len()];
        for (&u, &x) in inputs.iter().zip(input) {
            values[u] = x;
        }
        if let Some(b) = self.bias_unit() {
            values[b] = 1.0;
        }
        let hidden = self.hidden_units();
        let mut next = vec![0.0; hidden.len()];
        for _ in 0..self.unroll_steps {
            for (slot, &u) in next.iter_mut().zip(&hidden) {
                *slot = self.units[u].activation.activate(self.pre_activation(u, &values));
            }
            for (&u, &v) in hidden.iter().zip(&next) {
                values[u] = v;
            }
        }
        self.output_units()
            .iter()
            .map(|&u| self.units[u].activation.activate(self.pre_activation(u, &values)))
            .collect()
    }
}

/// Free-function form of [`Network::validate`].
pub fn validate(net: &Network) -> Vec<Violation> {
    net.validate()
}

/// Free-function form of [`Network::forward`].
pub fn forward(net: &Network, input: &[f64]) -> Result<Vec<f64>> {
    net.forward(input)
}
