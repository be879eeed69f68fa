//! Unit nonlinearities.
//!
//! Bilinear units (BiLU) are exactly the positively homogeneous activations
//! of degree one: `f(λx) = λ f(x)` for `λ > 0`. Bi-power units (BiPU) satisfy
//! `f(λx) = λ^c f(x)`. Both admit function-preserving rescaling of a unit's
//! incoming and outgoing weights; tanh and logistic do not.

mod approximator;

pub use approximator::{construct_universal_approximator, Approximation};

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ActivationSpec {
    /// `a·x` for `x < 0`, `b·x` for `x >= 0`.
    Bilu { a: f64, b: f64 },
    /// `C·x^c` for `x >= 0`, `D·|x|^c` for `x < 0`.
    Bipu {
        #[serde(rename = "C")]
        pos: f64,
        #[serde(rename = "D")]
        neg: f64,
        c: f64,
    },
    Tanh,
    Logistic,
}

impl ActivationSpec {
    pub const IDENTITY: Self = ActivationSpec::Bilu { a: 1.0, b: 1.0 };
    pub const RELU: Self = ActivationSpec::Bilu { a: 0.0, b: 1.0 };

    pub fn leaky_relu(alpha: f64) -> Self {
        ActivationSpec::Bilu { a: alpha, b: 1.0 }
    }

    pub fn bipu(pos: f64, neg: f64, c: f64) -> Result<Self> {
        let spec = ActivationSpec::Bipu { pos, neg, c };
        spec.check()?;
        Ok(spec)
    }

    /// Rejects parameter combinations that are not finite, or BiPUs that are
    /// discontinuous at the origin (`c <= 0`).
    pub fn check(&self) -> Result<()> {
        match *self {
            ActivationSpec::Bilu { a, b } => {
                if !(a.is_finite() && b.is_finite()) {
                    return Err(Error::InvalidActivation(format!(
                        "BiLU slopes must be finite (a={a}, b={b})"
                    )));
                }
            }
            ActivationSpec::Bipu { pos, neg, c } => {
                if !(pos.is_finite() && neg.is_finite()) {
                    return Err(Error::InvalidActivation(format!(
                        "BiPU coefficients must be finite (C={pos}, D={neg})"
                    )));
                }
                if !(c > 0.0 && c.is_finite()) {
                    return Err(Error::InvalidActivation(format!(
                        "BiPU exponent must be positive, got c={c}"
                    )));
                }
            }
            ActivationSpec::Tanh | ActivationSpec::Logistic => {}
        }
        Ok(())
    }

    pub fn activate(&self, x: f64) -> f64 {
        match *self {
            ActivationSpec::Bilu { a, b } => {
                if x < 0.0 {
                    a * x
                } else {
                    b * x
                }
            }
            ActivationSpec::Bipu { pos, neg, c } => {
                if x >= 0.0 {
                    pos * x.powf(c)
                } else {
                    neg * (-x).powf(c)
                }
            }
            ActivationSpec::Tanh => x.tanh(),
            ActivationSpec::Logistic => logistic(x),
        }
    }

    /// Derivative used by backpropagation. At `x = 0` a BiLU takes the
    /// `x >= 0` slope `b`.
    pub fn derivative(&self, x: f64) -> f64 {
        match *self {
            ActivationSpec::Bilu { a, b } => {
                if x < 0.0 {
                    a
                } else {
                    b
                }
            }
            ActivationSpec::Bipu { pos, neg, c } => {
                if x > 0.0 {
                    pos * c * x.powf(c - 1.0)
                } else if x < 0.0 {
                    -neg * c * (-x).powf(c - 1.0)
                } else if c > 1.0 {
                    0.0
                } else if c == 1.0 {
                    pos
                } else {
                    f64::INFINITY
                }
            }
            ActivationSpec::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
            ActivationSpec::Logistic => {
                let s = logistic(x);
                s * (1.0 - s)
            }
        }
    }

    /// Degree of positive homogeneity, or `None` for non-homogeneous units.
    pub fn homogeneity_exponent(&self) -> Option<f64> {
        match *self {
            ActivationSpec::Bilu { .. } => Some(1.0),
            ActivationSpec::Bipu { c, .. } => Some(c),
            ActivationSpec::Tanh | ActivationSpec::Logistic => None,
        }
    }

    pub fn is_homogeneous(&self) -> bool {
        self.homogeneity_exponent().is_some()
    }

    /// Whether the unit can sit in a gradient-trained network. BiPUs with
    /// `c < 1` have an unbounded derivative at the origin.
    pub fn is_trainable(&self) -> bool {
        match *self {
            ActivationSpec::Bipu { c, .. } => c >= 1.0,
            _ => true,
        }
    }
}

pub(crate) fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Free-function form of [`ActivationSpec::activate`].
pub fn activate(spec: &ActivationSpec, x: f64) -> f64 {
    spec.activate(x)
}

/// Free-function form of [`ActivationSpec::homogeneity_exponent`].
pub fn homogeneity_exponent(spec: &ActivationSpec) -> Option<f64> {
    spec.homogeneity_exponent()
}

/// Short names: `identity` (or `linear`), `relu`, `leaky:<alpha>`,
/// `bilu:<a>,<b>`, `bipu:<C>,<D>,<c>`, `tanh`, `logistic`.
impl FromStr for ActivationSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidActivation(format!("cannot parse activation '{s}'"));
        let nums = |rest: &str, n: usize| -> Result<Vec<f64>> {
            let v: Vec<f64> = rest
                .split(',')
                .map(|t| t.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| bad())?;
            if v.len() == n {
                Ok(v)
            } else {
                Err(bad())
            }
        };
        let spec = match s.trim() {
            "identity" | "linear" => ActivationSpec::IDENTITY,
            "relu" => ActivationSpec::RELU,
            "tanh" => ActivationSpec::Tanh,
            "logistic" | "sigmoid" => ActivationSpec::Logistic,
            other => match other.split_once(':') {
                Some(("leaky", rest)) => ActivationSpec::leaky_relu(nums(rest, 1)?[0]),
                Some(("bilu", rest)) => {
                    let v = nums(rest, 2)?;
                    ActivationSpec::Bilu { a: v[0], b: v[1] }
                }
                Some(("bipu", rest)) => {
                    let v = nums(rest, 3)?;
                    ActivationSpec::Bipu { pos: v[0], neg: v[1], c: v[2] }
                }
                _ => return Err(bad()),
            },
        };
        spec.check()?;
        Ok(spec)
    }
}
