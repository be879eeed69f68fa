//! Scaling and balancing of hidden units.
//!
//! Scaling unit `i` by `λ > 0` multiplies its incoming weights by `λ` and its
//! outgoing weights by `λ^{-c}`, where `c` is the unit's homogeneity exponent.
//! For homogeneous units this leaves the network function unchanged. Balancing
//! picks the `λ*` that minimizes the unit's share of the weight cost, after
//! which `Σ_IN g = c·Σ_OUT g` (single-term costs).

mod engine;

pub use engine::{
    partial_balance_pass, run_balancing, BalanceTrace, Schedule, ScheduleKind, ScheduleSpec,
    StopCriteria, DEFAULT_DEFICIT_TOL,
};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::netgraph::{Network, Role, UnitId};
use crate::regularizer::CostSpec;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BalanceReport {
    /// The balanced unit; for tied steps, the first unit of the group.
    pub unit: UnitId,
    pub lambda_star: f64,
    pub r_before: f64,
    pub r_after: f64,
    pub delta_r: f64,
}

// Initial log-space bracket for the bisection path; widened if it misses.
const BRACKET: (f64, f64) = (1e-8, 1e8);
const BISECTION_REL_WIDTH: f64 = 1e-14;

/// `λ*` for a unit (or tied group) with the given nonzero incoming and
/// outgoing weights. Errors name `unit` if a side is empty.
pub(crate) fn solve_lambda(
    unit: UnitId,
    incoming: &[f64],
    outgoing: &[f64],
    c: f64,
    cost: &CostSpec,
) -> Result<f64> {
    let a: f64 = incoming.iter().map(|&w| cost.balance_measure(w)).sum();
    let b: f64 = outgoing.iter().map(|&w| cost.balance_measure(w)).sum();
    if a == 0.0 {
        return Err(Error::Degenerate { unit, side: "incoming" });
    }
    if b == 0.0 {
        return Err(Error::Degenerate { unit, side: "outgoing" });
    }
    if let Some(t) = cost.single_term() {
        return Ok((c * b / a).powf(1.0 / (t.p * (c + 1.0))));
    }
    // λ·dR/dλ = Σ_IN φ(λw) - c·Σ_OUT φ(w/λ^c), φ(v) = v·g'(v); increasing in λ.
    let phi = |v: f64| cost.balance_measure(v);
    let slope = |log_l: f64| {
        let l = log_l.exp();
        let lc = (-c * log_l).exp();
        incoming.iter().map(|&w| phi(l * w)).sum::<f64>()
            - c * outgoing.iter().map(|&w| phi(w * lc)).sum::<f64>()
    };
    let (mut lo, mut hi) = (BRACKET.0.ln(), BRACKET.1.ln());
    while slope(lo) > 0.0 {
        lo -= (BRACKET.1 / BRACKET.0).ln();
    }
    while slope(hi) < 0.0 {
        hi += (BRACKET.1 / BRACKET.0).ln();
    }
    while hi - lo > BISECTION_REL_WIDTH {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if slope(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok((0.5 * (lo + hi)).exp())
}

fn check_scalable(net: &Network, unit: UnitId, allow_nonhomogeneous: bool) -> Result<f64> {
    let u = net.unit(unit)?;
    if u.role != Role::Hidden {
        return Err(Error::NotScalable {
            unit,
            reason: "visible units are pinned",
        });
    }
    match u.activation.homogeneity_exponent() {
        Some(c) => Ok(c),
        None if allow_nonhomogeneous => Ok(1.0),
        None => Err(Error::NotScalable {
            unit,
            reason: "activation is not homogeneous",
        }),
    }
}

pub(crate) fn nonzero_weights(net: &Network, edges: &[usize]) -> Vec<f64> {
    edges
        .iter()
        .map(|&k| net.edges()[k].weight)
        .filter(|&w| w != 0.0)
        .collect()
}

fn apply_scale(net: &mut Network, unit: UnitId, lambda: f64, c: f64) {
    let out_factor = lambda.powf(-c);
    for &k in net.in_edge_indices(unit).to_vec().iter() {
        let w = net.edges()[k].weight;
        net.set_weight(k, w * lambda);
    }
    for &k in net.out_edge_indices(unit).to_vec().iter() {
        let w = net.edges()[k].weight;
        net.set_weight(k, w * out_factor);
    }
}

fn local_cost(net: &Network, units: &[UnitId], cost: &CostSpec) -> f64 {
    units
        .iter()
        .flat_map(|&u| {
            net.in_edge_indices(u)
                .iter()
                .chain(net.out_edge_indices(u))
                .map(|&k| cost.weight_cost(net.edges()[k].weight))
        })
        .sum()
}

/// `S_λ(i)`: incoming weights ×λ, outgoing ×λ^{-c}.
pub fn scale_neuron(net: &Network, unit: UnitId, lambda: f64) -> Result<Network> {
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(Error::NonPositiveLambda(lambda));
    }
    let c = check_scalable(net, unit, false)?;
    let mut out = net.clone();
    apply_scale(&mut out, unit, lambda, c);
    Ok(out)
}

/// The cost-minimizing scaling factor for a hidden homogeneous unit.
pub fn optimal_lambda(net: &Network, unit: UnitId, cost: &CostSpec) -> Result<f64> {
    let c = check_scalable(net, unit, false)?;
    solve_lambda(
        unit,
        &nonzero_weights(net, net.in_edge_indices(unit)),
        &nonzero_weights(net, net.out_edge_indices(unit)),
        c,
        cost,
    )
}

/// Scales `unit` by its optimal factor.
pub fn balance_neuron(
    net: &Network,
    unit: UnitId,
    cost: &CostSpec,
) -> Result<(Network, BalanceReport)> {
    balance_neuron_with(net, unit, cost, false)
}

/// As [`balance_neuron`]; with `allow_nonhomogeneous` tanh/logistic units are
/// balanced as if `c = 1`, which changes the network function.
pub fn balance_neuron_with(
    net: &Network,
    unit: UnitId,
    cost: &CostSpec,
    allow_nonhomogeneous: bool,
) -> Result<(Network, BalanceReport)> {
    let c = check_scalable(net, unit, allow_nonhomogeneous)?;
    let lambda = solve_lambda(
        unit,
        &nonzero_weights(net, net.in_edge_indices(unit)),
        &nonzero_weights(net, net.out_edge_indices(unit)),
        c,
        cost,
    )?;
    let r_before = crate::regularizer::network_cost(net, cost);
    let local_before = local_cost(net, &[unit], cost);
    let mut out = net.clone();
    apply_scale(&mut out, unit, lambda, c);
    let delta_r = (local_before - local_cost(&out, &[unit], cost)).max(0.0);
    Ok((
        out,
        BalanceReport {
            unit,
            lambda_star: lambda,
            r_before,
            r_after: r_before - delta_r,
            delta_r,
        },
    ))
}

fn side_measures(net: &Network, unit: UnitId, cost: &CostSpec) -> (f64, f64) {
    let m = |list: &[usize]| -> f64 {
        list.iter()
            .map(|&k| cost.balance_measure(net.edges()[k].weight))
            .sum()
    };
    (m(net.in_edge_indices(unit)), m(net.out_edge_indices(unit)))
}

/// `(Σ_IN m - c·Σ_OUT m)²` with `m` the cost's balance measure (equal to `g`
/// for single-term costs). Zero iff the unit is balanced.
pub fn neuron_deficit(net: &Network, unit: UnitId, cost: &CostSpec) -> Result<f64> {
    let u = net.unit(unit)?;
    if u.role != Role::Hidden {
        return Err(Error::NotScalable {
            unit,
            reason: "deficits are defined for hidden units",
        });
    }
    let c = u.activation.homogeneity_exponent().unwrap_or(1.0);
    let (a, b) = side_measures(net, unit, cost);
    Ok((a - c * b).powi(2))
}

/// Sum of [`neuron_deficit`] over every hidden homogeneous unit.
pub fn network_deficit(net: &Network, cost: &CostSpec) -> f64 {
    net.balanceable_units()
        .into_iter()
        .map(|u| neuron_deficit(net, u, cost).expect("hidden unit"))
        .sum()
}

/// Balances a set of units with one shared factor. Requires a common
/// exponent and no edge between two members of the set.
pub fn balance_subset_tied(
    net: &Network,
    units: &[UnitId],
    cost: &CostSpec,
) -> Result<(Network, BalanceReport)> {
    let (c, incoming, outgoing) = tied_sides(net, units, false)?;
    let lambda = solve_lambda(
        units[0],
        &nonzero_weights(net, &incoming),
        &nonzero_weights(net, &outgoing),
        c,
        cost,
    )?;
    let r_before = crate::regularizer::network_cost(net, cost);
    let local_before = local_cost(net, units, cost);
    let mut out = net.clone();
    for &u in units {
        apply_scale(&mut out, u, lambda, c);
    }
    let delta_r = (local_before - local_cost(&out, units, cost)).max(0.0);
    Ok((
        out,
        BalanceReport {
            unit: units[0],
            lambda_star: lambda,
            r_before,
            r_after: r_before - delta_r,
            delta_r,
        },
    ))
}

/// Shared exponent and the union of incoming / outgoing edge indices of a tied group.
pub(crate) fn tied_sides(
    net: &Network,
    units: &[UnitId],
    allow_nonhomogeneous: bool,
) -> Result<(f64, Vec<usize>, Vec<usize>)> {
    if units.is_empty() {
        return Err(Error::InvalidSubset("empty unit set".into()));
    }
    let mut member = vec![false; net.num_units()];
    let mut c = None;
    for &u in units {
        let cu = check_scalable(net, u, allow_nonhomogeneous)?;
        if member[u] {
            return Err(Error::InvalidSubset(format!("unit {u} listed twice")));
        }
        member[u] = true;
        match c {
            None => c = Some(cu),
            Some(prev) if prev != cu => {
                return Err(Error::InvalidSubset(format!(
                    "mixed exponents {prev} and {cu} in one tied set"
                )))
            }
            _ => {}
        }
    }
    let mut incoming = Vec::new();
    let mut outgoing = Vec::new();
    for &u in units {
        for &k in net.in_edge_indices(u) {
            let from = net.edges()[k].from;
            if member[from] {
                return Err(Error::InvalidSubset(format!(
                    "edge {from} -> {u} joins two members of the set"
                )));
            }
            incoming.push(k);
        }
        outgoing.extend_from_slice(net.out_edge_indices(u));
    }
    Ok((c.expect("nonempty"), incoming, outgoing))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::activations::ActivationSpec;
    use crate::netgraph::{Edge, LayeredNet, Unit};
    use crate::regularizer::network_cost;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// One hidden unit (id 1) fed by inputs and feeding outputs with the given weights.
    fn star(incoming: &[f64], outgoing: &[f64], act: ActivationSpec) -> Network {
        let mut units = vec![Unit::new(0, Role::Hidden, act)];
        let mut edges = Vec::new();
        for &w in incoming {
            let id = units.len();
            units.push(Unit::new(id, Role::Input, ActivationSpec::IDENTITY));
            edges.push(Edge::new(id, 0, w));
        }
        for &w in outgoing {
            let id = units.len();
            units.push(Unit::new(id, Role::Output, ActivationSpec::IDENTITY));
            edges.push(Edge::new(0, id, w));
        }
        Network::new(units, edges, false, 1).unwrap()
    }

    fn sides(net: &Network, unit: UnitId) -> (Vec<f64>, Vec<f64>) {
        (
            net.in_edges(unit).unwrap().iter().map(|e| e.weight).collect(),
            net.out_edges(unit).unwrap().iter().map(|e| e.weight).collect(),
        )
    }

    /// Minimizer of `f` on `λ > 0`: bisection on a central-difference slope in log λ.
    fn search_min(f: impl Fn(f64) -> f64) -> f64 {
        let h = 1e-5;
        let slope = |t: f64| f((t + h).exp()) - f((t - h).exp());
        let (mut a, mut b) = ((1e-6f64).ln(), (1e6f64).ln());
        for _ in 0..200 {
            let m = 0.5 * (a + b);
            if slope(m) < 0.0 {
                a = m;
            } else {
                b = m;
            }
        }
        (0.5 * (a + b)).exp()
    }

    #[test]
    fn scale_identity_and_arithmetic() {
        let net = star(&[2.0], &[4.0], ActivationSpec::RELU);
        assert_eq!(scale_neuron(&net, 0, 1.0).unwrap(), net);
        let scaled = scale_neuron(&net, 0, 2.0).unwrap();
        assert_eq!(sides(&scaled, 0), (vec![4.0], vec![2.0]));
    }

    #[test]
    fn scale_rejects_bad_input() {
        let net = star(&[2.0], &[4.0], ActivationSpec::RELU);
        assert!(matches!(scale_neuron(&net, 0, 0.0), Err(Error::NonPositiveLambda(_))));
        assert!(matches!(scale_neuron(&net, 0, -1.0), Err(Error::NonPositiveLambda(_))));
        assert!(matches!(scale_neuron(&net, 1, 2.0), Err(Error::NotScalable { .. })));
        let tanh = star(&[2.0], &[4.0], ActivationSpec::Tanh);
        assert!(matches!(scale_neuron(&tanh, 0, 2.0), Err(Error::NotScalable { .. })));
    }

    #[test]
    fn bipu_scaling_preserves_function() {
        let sq = ActivationSpec::bipu(1.0, 0.5, 2.0).unwrap();
        let net = star(&[1.0], &[8.0], sq);
        let scaled = scale_neuron(&net, 0, 2.0).unwrap();
        assert_eq!(sides(&scaled, 0), (vec![2.0], vec![2.0]));
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let x = rng.random_range(-3.0..3.0);
            let a = net.forward(&[x]).unwrap()[0];
            let b = scaled.forward(&[x]).unwrap()[0];
            assert!((a - b).abs() <= 1e-9 * a.abs().max(1e-12));
        }
    }

    #[test]
    fn optimal_lambda_examples() {
        let l2 = CostSpec::l2();
        let net = star(&[1.0], &[1.0], ActivationSpec::RELU);
        assert_eq!(optimal_lambda(&net, 0, &l2).unwrap(), 1.0);

        let net = star(&[2.0], &[1.0, 1.0], ActivationSpec::RELU);
        let oracle = search_min(|l| 4.0 * l * l + 2.0 / (l * l));
        let got = optimal_lambda(&net, 0, &l2).unwrap();
        assert!((got - oracle).abs() < 1e-9, "{got} vs {oracle}");
        assert!((got - 0.840896).abs() < 1e-6);

        let sq = ActivationSpec::bipu(1.0, 1.0, 2.0).unwrap();
        let net = star(&[1.0], &[1.0], sq);
        let oracle = search_min(|l| l * l + 1.0 / l.powi(4));
        let got = optimal_lambda(&net, 0, &l2).unwrap();
        assert!((got - oracle).abs() < 1e-9);
        assert!((got - 1.122462).abs() < 1e-6);
    }

    #[test]
    fn balance_neuron_examples() {
        let l2 = CostSpec::l2();
        let net = star(&[1.0], &[1.0], ActivationSpec::RELU);
        let (same, rep) = balance_neuron(&net, 0, &l2).unwrap();
        assert_eq!(same, net);
        assert_eq!(rep.delta_r, 0.0);

        let net = star(&[2.0], &[1.0, 1.0], ActivationSpec::RELU);
        let (bal, rep) = balance_neuron(&net, 0, &l2).unwrap();
        let (i, o) = sides(&bal, 0);
        assert!((i[0] - 1.681793).abs() < 1e-6);
        assert!((o[0] - 1.189207).abs() < 1e-6 && (o[1] - 1.189207).abs() < 1e-6);
        let sin: f64 = i.iter().map(|w| w * w).sum();
        let sout: f64 = o.iter().map(|w| w * w).sum();
        assert!((sin - sout).abs() < 1e-12 && (sin - 8f64.sqrt()).abs() < 1e-6);
        let eq8 = (2.0 - 2f64.sqrt()).powi(2);
        assert!((rep.delta_r - eq8).abs() < 1e-12);
        assert!((rep.delta_r - 0.343146).abs() < 1e-6);
        assert!((rep.r_before - rep.r_after - rep.delta_r).abs() < 1e-12);

        let l1 = CostSpec::l1();
        let net = star(&[3.0], &[1.0, 1.0], ActivationSpec::RELU);
        let oracle = search_min(|l| 3.0 * l + 2.0 / l);
        let (bal, rep) = balance_neuron(&net, 0, &l1).unwrap();
        assert!((rep.lambda_star - oracle).abs() < 1e-9);
        assert!((rep.lambda_star - (2.0f64 / 3.0).sqrt()).abs() < 1e-14);
        let (i, o) = sides(&bal, 0);
        assert!((i[0] - 6f64.sqrt()).abs() < 1e-12);
        assert!((o.iter().sum::<f64>() - 6f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn balancing_is_idempotent() {
        let l2 = CostSpec::l2();
        let net = star(&[2.0, -0.5], &[1.0, 3.0], ActivationSpec::RELU);
        let (once, _) = balance_neuron(&net, 0, &l2).unwrap();
        let (_, rep) = balance_neuron(&once, 0, &l2).unwrap();
        assert!((rep.lambda_star - 1.0).abs() < 1e-14);
    }

    #[test]
    fn degenerate_sides() {
        let net = star(&[0.0], &[1.0], ActivationSpec::RELU);
        assert!(matches!(
            optimal_lambda(&net, 0, &CostSpec::l2()),
            Err(Error::Degenerate { side: "incoming", .. })
        ));
        let net = star(&[1.0], &[0.0], ActivationSpec::RELU);
        assert!(matches!(
            balance_neuron(&net, 0, &CostSpec::l2()),
            Err(Error::Degenerate { side: "outgoing", .. })
        ));
    }

    #[test]
    fn multi_term_lambda_minimizes_local_cost() {
        let cost: CostSpec = "0.3*l1+l2".parse().unwrap();
        let ins = [1.5, -0.2, 0.7];
        let outs = [0.1, 2.2];
        let net = star(&ins, &outs, ActivationSpec::RELU);
        let local = |l: f64| {
            ins.iter().map(|w| cost.weight_cost(l * w)).sum::<f64>()
                + outs.iter().map(|w| cost.weight_cost(w / l)).sum::<f64>()
        };
        let oracle = search_min(local);
        let got = optimal_lambda(&net, 0, &cost).unwrap();
        assert!((got - oracle).abs() < 1e-8 * oracle);
        // stationarity: Σ_IN v g'(v) = Σ_OUT v g'(v) after balancing
        let (bal, _) = balance_neuron(&net, 0, &cost).unwrap();
        let (i, o) = sides(&bal, 0);
        let vg = |v: &f64| v * cost.derivative(*v).unwrap();
        let lhs: f64 = i.iter().map(vg).sum();
        let rhs: f64 = o.iter().map(vg).sum();
        assert!((lhs - rhs).abs() < 1e-9 * lhs);
    }

    #[test]
    fn bipu_balance_equation_holds() {
        let c3 = ActivationSpec::bipu(1.0, -1.0, 3.0).unwrap();
        let net = star(&[0.4, 1.3], &[2.0, -0.6, 0.9], c3);
        let cost = CostSpec::lp(1.5);
        let (bal, _) = balance_neuron(&net, 0, &cost).unwrap();
        let (i, o) = sides(&bal, 0);
        let a: f64 = i.iter().map(|w| cost.weight_cost(*w)).sum();
        let b: f64 = o.iter().map(|w| cost.weight_cost(*w)).sum();
        assert!((a - 3.0 * b).abs() <= 1e-9 * a);
    }

    #[test]
    fn deficit_examples() {
        let l2 = CostSpec::l2();
        let net = star(&[1.0], &[1.0], ActivationSpec::RELU);
        assert_eq!(neuron_deficit(&net, 0, &l2).unwrap(), 0.0);
        assert_eq!(network_deficit(&net, &l2), 0.0);
        let net = star(&[2.0], &[1.0, 1.0], ActivationSpec::RELU);
        assert_eq!(neuron_deficit(&net, 0, &l2).unwrap(), 4.0);
        assert_eq!(network_deficit(&net, &l2), 4.0);
    }

    #[test]
    fn deficit_vanishes_after_balancing_random_neurons() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let l2 = CostSpec::l2();
        for _ in 0..100 {
            let ins: Vec<f64> = (0..rng.random_range(1..5)).map(|_| rng.random_range(-2.0..2.0)).collect();
            let outs: Vec<f64> = (0..rng.random_range(1..5)).map(|_| rng.random_range(-2.0..2.0)).collect();
            let net = star(&ins, &outs, ActivationSpec::RELU);
            let (bal, _) = balance_neuron(&net, 0, &l2).unwrap();
            assert!(neuron_deficit(&bal, 0, &l2).unwrap() <= 1e-12);
        }
    }

    #[test]
    fn network_deficit_matches_per_unit_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let net = LayeredNet::new(&[3, 5, 4, 2]).bias(true).build(&mut rng);
        let cost = CostSpec::lp(1.5);
        let mut oracle = 0.0;
        for u in net.hidden_units() {
            let mut a = 0.0;
            let mut b = 0.0;
            for e in net.edges() {
                if e.to == u {
                    a += e.weight.abs().powf(1.5);
                }
                if e.from == u {
                    b += e.weight.abs().powf(1.5);
                }
            }
            oracle += (a - b) * (a - b);
        }
        let got = network_deficit(&net, &cost);
        assert!((got - oracle).abs() <= 1e-12 * oracle);
    }

    fn two_unit_layer(in_w: [f64; 4], out_w: [f64; 2]) -> Network {
        // inputs 0,1 ; hidden 2,3 ; output 4
        let mut units = vec![
            Unit::new(0, Role::Input, ActivationSpec::IDENTITY),
            Unit::new(1, Role::Input, ActivationSpec::IDENTITY),
            Unit::new(2, Role::Hidden, ActivationSpec::RELU),
            Unit::new(3, Role::Hidden, ActivationSpec::RELU),
        ];
        units.push(Unit::new(4, Role::Output, ActivationSpec::IDENTITY));
        let edges = vec![
            Edge::new(0, 2, in_w[0]),
            Edge::new(1, 2, in_w[1]),
            Edge::new(0, 3, in_w[2]),
            Edge::new(1, 3, in_w[3]),
            Edge::new(2, 4, out_w[0]),
            Edge::new(3, 4, out_w[1]),
        ];
        Network::new(units, edges, false, 1).unwrap()
    }

    #[test]
    fn tied_reduces_to_single_neuron() {
        let net = star(&[2.0], &[1.0, 1.0], ActivationSpec::RELU);
        let l2 = CostSpec::l2();
        let (a, ra) = balance_subset_tied(&net, &[0], &l2).unwrap();
        let (b, rb) = balance_neuron(&net, 0, &l2).unwrap();
        assert_eq!(a, b);
        assert_eq!(ra.lambda_star, rb.lambda_star);
    }

    #[test]
    fn tied_layer_aggregate_balance() {
        // aggregate IN cost 8, OUT cost 2
        let s = 2f64.sqrt();
        let net = two_unit_layer([s, s, s, s], [1.0, 1.0]);
        let l2 = CostSpec::l2();
        let oracle = search_min(|l| 8.0 * l * l + 2.0 / (l * l));
        let (bal, rep) = balance_subset_tied(&net, &[2, 3], &l2).unwrap();
        assert!((rep.lambda_star - oracle).abs() < 1e-9);
        assert!((rep.lambda_star - 0.25f64.powf(0.25)).abs() < 1e-14);
        let agg_in: f64 = [2, 3].iter().flat_map(|&u| bal.in_edges(u).unwrap()).map(|e| e.weight * e.weight).sum();
        let agg_out: f64 = [2, 3].iter().flat_map(|&u| bal.out_edges(u).unwrap()).map(|e| e.weight * e.weight).sum();
        assert!((agg_in - 4.0).abs() < 1e-9 && (agg_out - 4.0).abs() < 1e-9);
    }

    #[test]
    fn tied_keeps_individual_imbalance() {
        // unit 2: in 4, out 1 ; unit 3: in 1, out 4 -> aggregates equal.
        let net = two_unit_layer([2f64.sqrt(), 2f64.sqrt(), 1.0 / 2f64.sqrt(), 1.0 / 2f64.sqrt()], [1.0, 2.0]);
        let l2 = CostSpec::l2();
        let (bal, rep) = balance_subset_tied(&net, &[2, 3], &l2).unwrap();
        assert!((rep.lambda_star - 1.0).abs() < 1e-12);
        assert!(neuron_deficit(&bal, 2, &l2).unwrap() > 1.0);
        assert!(neuron_deficit(&bal, 3, &l2).unwrap() > 1.0);
    }

    #[test]
    fn tied_rejects_intra_set_edges_and_mixed_exponents() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let net = LayeredNet::new(&[2, 3, 3, 1]).build(&mut rng);
        let layers = net.hidden_layers().unwrap();
        let mixed = vec![layers[0][0], layers[1][0]];
        assert!(matches!(
            balance_subset_tied(&net, &mixed, &CostSpec::l2()),
            Err(Error::InvalidSubset(_))
        ));
        let mut net2 = net.clone();
        net2.set_activation(layers[0][1], ActivationSpec::bipu(1.0, 0.0, 2.0).unwrap())
            .unwrap();
        assert!(matches!(
            balance_subset_tied(&net2, &layers[0], &CostSpec::l2()),
            Err(Error::InvalidSubset(_))
        ));
    }

    #[test]
    fn scaling_commutes() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let net = LayeredNet::new(&[2, 3, 3, 1]).bias(true).build(&mut rng);
        let h = net.hidden_units();
        let (i, j) = (h[0], h[4]);
        let ab = scale_neuron(&scale_neuron(&net, i, 1.7).unwrap(), j, 0.3).unwrap();
        let ba = scale_neuron(&scale_neuron(&net, j, 0.3).unwrap(), i, 1.7).unwrap();
        assert_eq!(ab.weights(), ba.weights());
        let twice = scale_neuron(&scale_neuron(&net, i, 1.7).unwrap(), i, 0.3).unwrap();
        let once = scale_neuron(&net, i, 1.7 * 0.3).unwrap();
        for (a, b) in twice.weights().iter().zip(once.weights()) {
            assert!((a - b).abs() <= 1e-12 * b.abs().max(1e-300));
        }
    }

    #[test]
    fn balancing_does_not_commute_on_a_chain() {
        // input 0 -> 1 -> 2 -> output 3, weights 4, 1, 1
        let units = vec![
            Unit::new(0, Role::Input, ActivationSpec::IDENTITY),
            Unit::new(1, Role::Hidden, ActivationSpec::RELU),
            Unit::new(2, Role::Hidden, ActivationSpec::RELU),
            Unit::new(3, Role::Output, ActivationSpec::IDENTITY),
        ];
        let edges = vec![Edge::new(0, 1, 4.0), Edge::new(1, 2, 1.0), Edge::new(2, 3, 1.0)];
        let net = Network::new(units, edges, false, 1).unwrap();
        let l2 = CostSpec::l2();
        let b12 = balance_neuron(&balance_neuron(&net, 1, &l2).unwrap().0, 2, &l2).unwrap().0;
        let b21 = balance_neuron(&balance_neuron(&net, 2, &l2).unwrap().0, 1, &l2).unwrap().0;
        assert_ne!(b12.weights(), b21.weights());
    }

    #[test]
    fn disjoint_units_commute_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let net = LayeredNet::new(&[3, 4, 2]).bias(true).build(&mut rng);
        let l2 = CostSpec::l2();
        let h = net.hidden_units();
        let ab = balance_neuron(&balance_neuron(&net, h[0], &l2).unwrap().0, h[2], &l2).unwrap().0;
        let ba = balance_neuron(&balance_neuron(&net, h[2], &l2).unwrap().0, h[0], &l2).unwrap().0;
        assert_eq!(ab.weights(), ba.weights());
    }

    #[test]
    fn network_cost_drops_by_reported_delta() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let net = LayeredNet::new(&[3, 4, 4, 2]).bias(true).build(&mut rng);
        let cost = CostSpec::lp(3.0);
        for u in net.hidden_units() {
            let (bal, rep) = balance_neuron(&net, u, &cost).unwrap();
            let after = network_cost(&bal, &cost);
            assert!((rep.r_before - after - rep.delta_r).abs() < 1e-10);
        }
    }

    proptest! {
        #[test]
        fn scaling_preserves_signs_and_zeros(seed in 0u64..1000, lambda in 0.01f64..100.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut net = LayeredNet::new(&[2, 3, 2]).bias(true).build(&mut rng);
            net.set_weight(0, 0.0);
            for u in net.hidden_units() {
                let scaled = scale_neuron(&net, u, lambda).unwrap();
                for (a, b) in net.weights().iter().zip(scaled.weights()) {
                    prop_assert_eq!(*a == 0.0, b == 0.0);
                    prop_assert_eq!(a.signum(), b.signum());
                }
            }
        }

        #[test]
        fn eq8_delta_for_single_term(ins in prop::collection::vec(-5.0f64..5.0, 1..5),
                                     outs in prop::collection::vec(-5.0f64..5.0, 1..5),
                                     p in prop::sample::select(vec![0.5, 1.0, 2.0, 3.0])) {
            prop_assume!(ins.iter().any(|w| *w != 0.0) && outs.iter().any(|w| *w != 0.0));
            let net = star(&ins, &outs, ActivationSpec::RELU);
            let cost = CostSpec::lp(p);
            let (_, rep) = balance_neuron(&net, 0, &cost).unwrap();
            let a: f64 = ins.iter().map(|w| w.abs().powf(p)).sum();
            let b: f64 = outs.iter().map(|w| w.abs().powf(p)).sum();
            let eq8 = (a.sqrt() - b.sqrt()).powi(2);
            prop_assert!((rep.delta_r - eq8).abs() <= 1e-10 * (1.0 + a + b));
        }
    }
}
