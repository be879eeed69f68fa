//! Damped Newton on `R(l) = Σ_{j→i} β|w_ij|^p · exp(p·(l_i - c_j·l_j))`.
//!
//! `l_i = log Λ_i` is free for hidden homogeneous units and 0 elsewhere.
//! Every free unit lies on a nonzero source-to-output path, which makes `R`
//! coercive and strictly convex, so the minimizer is unique.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use super::{
    constraint_residuals, enumerate_constraints, is_pinned, MultiplierAssignment,
    SelfConsistentConfig,
};
use crate::error::{Error, Result};
use crate::netgraph::{Network, UnitId};
use crate::regularizer::CostSpec;

const GRAD_TOL: f64 = 1e-10;
const MAX_ITERATIONS: usize = 500;
const ARMIJO: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OracleReport {
    pub r_star: f64,
    pub lambda_per_unit: Vec<f64>,
    pub grad_norm: f64,
    pub iterations: usize,
    pub constraint_residuals: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct OracleSolution {
    pub config: SelfConsistentConfig,
    pub multipliers: MultiplierAssignment,
    pub r_star: f64,
    pub report: OracleReport,
}

impl OracleSolution {
    /// The network at the optimum.
    pub fn balanced_network(&self, net: &Network) -> Network {
        self.config.apply(net)
    }
}

struct Term {
    coef: f64,
    // (variable index, d z / d x) for the free endpoints of the edge
    to: Option<(usize, f64)>,
    from: Option<(usize, f64)>,
}

struct Problem {
    terms: Vec<Term>,
    n: usize,
}

impl Problem {
    fn z(t: &Term, x: &DVector<f64>) -> f64 {
        t.to.map_or(0.0, |(i, d)| d * x[i]) + t.from.map_or(0.0, |(i, d)| d * x[i])
    }

    fn value(&self, x: &DVector<f64>) -> f64 {
        self.terms.iter().map(|t| t.coef * Self::z(t, x).exp()).sum()
    }

    fn grad_hess(&self, x: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>) {
        let mut g = DVector::zeros(self.n);
        let mut h = DMatrix::zeros(self.n, self.n);
        for t in &self.terms {
            let v = t.coef * Self::z(t, x).exp();
            let parts = [t.to, t.from];
            for &(i, di) in parts.iter().flatten() {
                g[i] += v * di;
                for &(j, dj) in parts.iter().flatten() {
                    h[(i, j)] += v * di * dj;
                }
            }
        }
        (g, h)
    }
}

/// Minimizes a single-term `L_p` cost over all function-preserving rescalings.
pub fn solve_convex(net: &Network, cost: &CostSpec) -> Result<OracleSolution> {
    let term = cost.single_term().ok_or_else(|| {
        Error::CostSpec(format!("the convex oracle needs a single-term cost, got '{cost}'"))
    })?;
    let constraints = enumerate_constraints(net)?;

    let mut var: Vec<Option<usize>> = vec![None; net.num_units()];
    let mut free: Vec<UnitId> = Vec::new();
    for u in 0..net.num_units() {
        if !is_pinned(net, u) {
            var[u] = Some(free.len());
            free.push(u);
        }
    }
    let p = term.p;
    let terms: Vec<Term> = net
        .edges()
        .iter()
        .filter(|e| e.weight != 0.0)
        .map(|e| {
            let c = net.units()[e.from]
                .activation
                .homogeneity_exponent()
                .unwrap_or(1.0);
            Term {
                coef: term.beta * e.weight.abs().powf(p),
                to: var[e.to].map(|i| (i, p)),
                from: var[e.from].map(|i| (i, -p * c)),
            }
        })
        .collect();
    let problem = Problem { terms, n: free.len() };

    let mut x = DVector::zeros(problem.n);
    let mut r = problem.value(&x);
    let mut iterations = 0;
    let mut grad_norm;
    loop {
        let (g, h) = problem.grad_hess(&x);
        grad_norm = g.amax();
        if grad_norm <= GRAD_TOL * r.max(1.0) {
            break;
        }
        if iterations == MAX_ITERATIONS {
            return Err(Error::SolverNonConvergence { iterations, grad_norm });
        }
        iterations += 1;
        let step = match h.clone().cholesky() {
            Some(ch) => ch.solve(&(-&g)),
            None => h
                .lu()
                .solve(&(-&g))
                .filter(|d| d.dot(&g) < 0.0)
                .unwrap_or_else(|| -&g),
        };
        let slope = g.dot(&step);
        if -slope <= 16.0 * f64::EPSILON * r.max(1.0) {
            // The predicted decrease is below the resolution of R, so the
            // line search cannot judge it; take the full Newton step.
            x += &step;
            r = problem.value(&x);
            continue;
        }
        let mut alpha = 1.0;
        let mut accepted = false;
        while alpha > 1e-20 {
            let trial = &x + alpha * &step;
            let rt = problem.value(&trial);
            if rt <= r + ARMIJO * alpha * slope {
                x = trial;
                r = rt;
                accepted = true;
                break;
            }
            alpha *= 0.5;
        }
        if !accepted {
            // No representable decrease left along the Newton direction.
            return Err(Error::SolverNonConvergence { iterations, grad_norm });
        }
    }

    let mut lambda = vec![1.0; net.num_units()];
    for (k, &u) in free.iter().enumerate() {
        lambda[u] = x[k].exp();
    }
    let multipliers = MultiplierAssignment { lambda_per_unit: lambda };
    let config = SelfConsistentConfig::from_multipliers(net, &multipliers);
    let residuals = constraint_residuals(&config, net, &constraints);
    Ok(OracleSolution {
        report: OracleReport {
            r_star: r,
            lambda_per_unit: multipliers.lambda_per_unit.clone(),
            grad_norm,
            iterations,
            constraint_residuals: residuals,
        },
        config,
        multipliers,
        r_star: r,
    })
}
