//! Additive weight costs `R(W) = Σ_w g(w)` with `g(w) = Σ_t β_t |w|^{p_t}`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::netgraph::Network;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostTerm {
    pub p: f64,
    pub beta: f64,
}

/// A sum of power-law terms. Each term has `p > 0` and `beta > 0`, so the
/// per-weight cost is continuous, even, zero at the origin and strictly
/// increasing in `|w|`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct CostSpec {
    terms: Vec<CostTerm>,
}

impl CostSpec {
    pub fn new(terms: Vec<CostTerm>) -> Result<Self> {
        if terms.is_empty() {
            return Err(Error::CostSpec("at least one term is required".into()));
        }
        for t in &terms {
            if !(t.p > 0.0 && t.p.is_finite()) {
                return Err(Error::CostSpec(format!("exponent must be positive, got {}", t.p)));
            }
            if !(t.beta > 0.0 && t.beta.is_finite()) {
                return Err(Error::CostSpec(format!(
                    "coefficient must be positive, got {}",
                    t.beta
                )));
            }
        }
        Ok(CostSpec { terms })
    }

    pub fn lp(p: f64) -> Self {
        Self::scaled_lp(p, 1.0)
    }

    pub fn scaled_lp(p: f64, beta: f64) -> Self {
        Self::new(vec![CostTerm { p, beta }]).expect("valid L_p term")
    }

    pub fn l1() -> Self {
        Self::lp(1.0)
    }

    pub fn l2() -> Self {
        Self::lp(2.0)
    }

    pub fn terms(&self) -> &[CostTerm] {
        &self.terms
    }

    /// `(p, beta)` when the cost is a single power term.
    pub fn single_term(&self) -> Option<CostTerm> {
        match self.terms.as_slice() {
            [t] => Some(*t),
            _ => None,
        }
    }

    pub fn max_exponent(&self) -> f64 {
        self.terms.iter().map(|t| t.p).fold(0.0, f64::max)
    }

    pub fn min_exponent(&self) -> f64 {
        self.terms.iter().map(|t| t.p).fold(f64::INFINITY, f64::min)
    }

    pub fn weight_cost(&self, w: f64) -> f64 {
        let a = w.abs();
        self.terms.iter().map(|t| t.beta * a.powf(t.p)).sum()
    }

    /// `g'(w)`; undefined at zero when some exponent is `<= 1`.
    pub fn derivative(&self, w: f64) -> Result<f64> {
        if w == 0.0 {
            if let Some(t) = self.terms.iter().find(|t| t.p <= 1.0) {
                return Err(Error::DerivativeAtZero { p: t.p });
            }
            return Ok(0.0);
        }
        Ok(self.subgradient(w))
    }

    /// `g'(w)` with the value 0 chosen at the origin.
    pub fn subgradient(&self, w: f64) -> f64 {
        if w == 0.0 {
            return 0.0;
        }
        let a = w.abs();
        let s = w.signum();
        self.terms
            .iter()
            .map(|t| t.beta * t.p * s * a.powf(t.p - 1.0))
            .sum()
    }

    /// `w·g'(w) / p_max`, the per-weight quantity equalized by balancing.
    ///
    /// Stationarity of a unit's cost under rescaling is
    /// `Σ_IN v g'(v) = c·Σ_OUT v g'(v)`. For a single term this reduces to
    /// `g` itself, so single-term balance reads `Σ_IN g = c·Σ_OUT g`.
    pub fn balance_measure(&self, w: f64) -> f64 {
        let a = w.abs();
        let pmax = self.max_exponent();
        self.terms
            .iter()
            .map(|t| (t.p / pmax) * t.beta * a.powf(t.p))
            .sum()
    }
}

impl fmt::Display for CostSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, t) in self.terms.iter().enumerate() {
            if k > 0 {
                f.write_str("+")?;
            }
            if t.beta != 1.0 {
                write!(f, "{}*", t.beta)?;
            }
            if t.p == 1.0 {
                f.write_str("l1")?;
            } else if t.p == 2.0 {
                f.write_str("l2")?;
            } else {
                write!(f, "lp:{}", t.p)?;
            }
        }
        Ok(())
    }
}

impl FromStr for CostSpec {
    type Err = Error;

    /// Parses `l2`, `l1`, `lp:<p>`, optionally `<beta>*`-prefixed and joined
    /// by `+`, e.g. `0.015*l1+1.0*l2`.
    fn from_str(s: &str) -> Result<Self> {
        let mut terms = Vec::new();
        for raw in s.split('+') {
            let token = raw.trim();
            if token.is_empty() {
                return Err(Error::CostSpec(format!("empty term in '{s}'")));
            }
            let (beta, body) = match token.split_once('*') {
                Some((b, body)) => {
                    let beta: f64 = b.trim().parse().map_err(|_| {
                        Error::CostSpec(format!("bad coefficient '{}' in term '{token}'", b.trim()))
                    })?;
                    (beta, body.trim())
                }
                None => (1.0, token),
            };
            let lower = body.to_ascii_lowercase();
            let p = match lower.as_str() {
                "l1" => 1.0,
                "l2" => 2.0,
                other => match other.strip_prefix("lp:") {
                    Some(p) => p.trim().parse::<f64>().map_err(|_| {
                        Error::CostSpec(format!("bad exponent '{}' in term '{token}'", p.trim()))
                    })?,
                    None => {
                        return Err(Error::CostSpec(format!("unknown cost token '{body}'")));
                    }
                },
            };
            terms.push(CostTerm { p, beta });
        }
        CostSpec::new(terms)
    }
}

impl TryFrom<String> for CostSpec {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<CostSpec> for String {
    fn from(c: CostSpec) -> String {
        c.to_string()
    }
}

pub fn weight_cost(spec: &CostSpec, w: f64) -> f64 {
    spec.weight_cost(w)
}

pub fn cost_derivative(spec: &CostSpec, w: f64) -> Result<f64> {
    spec.derivative(w)
}

/// Total cost over every edge, bias edges included, summed in edge-list order.
pub fn network_cost(net: &Network, spec: &CostSpec) -> f64 {
    net.edges().iter().map(|e| spec.weight_cost(e.weight)).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::activations::ActivationSpec;
    use crate::netgraph::{Edge, Network, Role, Unit};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn scalar_costs() {
        assert_eq!(CostSpec::l2().weight_cost(2.0), 4.0);
        assert_eq!(CostSpec::scaled_lp(1.0, 0.5).weight_cost(-3.0), 1.5);
        let mixed: CostSpec = "l2+l1".parse().unwrap();
        assert_eq!(mixed.weight_cost(2.0), 6.0);
    }

    #[test]
    fn derivatives() {
        assert_eq!(CostSpec::l2().derivative(3.0).unwrap(), 6.0);
        assert_eq!(CostSpec::l1().derivative(-2.0).unwrap(), -1.0);
        assert!(matches!(
            CostSpec::l1().derivative(0.0),
            Err(Error::DerivativeAtZero { .. })
        ));
        assert_eq!(CostSpec::l2().derivative(0.0).unwrap(), 0.0);
    }

    #[test]
    fn derivative_matches_finite_difference() {
        let spec = CostSpec::l2();
        let h = 1e-5;
        let w = 1.7;
        let fd = (spec.weight_cost(w + h) - spec.weight_cost(w - h)) / (2.0 * h);
        assert!((fd - spec.derivative(w).unwrap()).abs() < 1e-7);
    }

    #[test]
    fn parse_and_display() {
        let c: CostSpec = "0.015*l1+1.0*l2".parse().unwrap();
        assert_eq!(
            c.terms(),
            &[CostTerm { p: 1.0, beta: 0.015 }, CostTerm { p: 2.0, beta: 1.0 }]
        );
        assert_eq!(c.to_string(), "0.015*l1+l2");
        let c: CostSpec = "lp:1.5".parse().unwrap();
        assert_eq!(c.single_term(), Some(CostTerm { p: 1.5, beta: 1.0 }));
        let back: CostSpec = c.to_string().parse().unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn parse_errors_name_the_token() {
        let err = "l2+l7".parse::<CostSpec>().unwrap_err().to_string();
        assert!(err.contains("l7"), "{err}");
        let err = "x*l2".parse::<CostSpec>().unwrap_err().to_string();
        assert!(err.contains("'x'"), "{err}");
        assert!("lp:-1".parse::<CostSpec>().is_err());
        assert!("0*l2".parse::<CostSpec>().is_err());
    }

    fn edge_net(weights: &[f64]) -> Network {
        let mut units = vec![Unit::new(0, Role::Input, ActivationSpec::IDENTITY)];
        let mut edges = Vec::new();
        for (k, &w) in weights.iter().enumerate() {
            units.push(Unit::new(k + 1, Role::Output, ActivationSpec::IDENTITY));
            edges.push(Edge::new(0, k + 1, w));
        }
        Network::new(units, edges, false, 1).unwrap()
    }

    #[test]
    fn network_costs() {
        assert_eq!(network_cost(&edge_net(&[]), &CostSpec::l2()), 0.0);
        assert_eq!(network_cost(&edge_net(&[1.0, -1.0, 2.0]), &CostSpec::l2()), 6.0);
    }

    #[test]
    fn network_cost_is_order_insensitive() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let weights: Vec<f64> = (0..200).map(|_| rng.random_range(-3.0..3.0)).collect();
        let spec = CostSpec::lp(1.5);
        let got = network_cost(&edge_net(&weights), &spec);
        let mut mags: Vec<f64> = weights.iter().map(|w| w.abs()).collect();
        mags.sort_by(f64::total_cmp);
        let oracle: f64 = mags.iter().map(|m| m.powf(1.5)).sum();
        assert!((got - oracle).abs() <= 1e-12 * oracle);
    }

    #[test]
    fn beta_does_not_move_single_term_balance_measure_ratio() {
        let a = CostSpec::scaled_lp(2.0, 1.0);
        let b = CostSpec::scaled_lp(2.0, 7.5);
        let r_a = a.balance_measure(3.0) / a.balance_measure(1.2);
        let r_b = b.balance_measure(3.0) / b.balance_measure(1.2);
        assert!((r_a - r_b).abs() < 1e-14);
    }

    fn spec_strategy() -> impl Strategy<Value = CostSpec> {
        prop::collection::vec((0.2f64..4.0, 0.01f64..3.0), 1..4).prop_map(|ts| {
            CostSpec::new(ts.into_iter().map(|(p, beta)| CostTerm { p, beta }).collect()).unwrap()
        })
    }

    proptest! {
        #[test]
        fn symmetric(spec in spec_strategy(), w in -50.0f64..50.0) {
            prop_assert_eq!(spec.weight_cost(w), spec.weight_cost(-w));
        }

        #[test]
        fn strictly_increasing_in_magnitude(spec in spec_strategy(),
                                            mut mags in prop::collection::vec(0.0f64..20.0, 2..20)) {
            mags.sort_by(f64::total_cmp);
            mags.dedup();
            for pair in mags.windows(2) {
                prop_assert!(spec.weight_cost(pair[0]) < spec.weight_cost(pair[1]));
            }
        }

        #[test]
        fn derivative_points_away_from_zero(spec in spec_strategy(), w in -50.0f64..50.0) {
            prop_assume!(w != 0.0);
            prop_assert!(w * spec.derivative(w).unwrap() >= 0.0);
        }
    }
}
