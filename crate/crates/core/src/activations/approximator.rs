//! Single-hidden-layer ReLU interpolant of a function sampled on `[0, 1]`.
//!
//! Hidden unit `k` (1-based) sees `x - (k-1)/N` and contributes
//! `β_k·max(0, x - (k-1)/N)` to a linear output unit with bias `β_0`. Choosing
//! `β_0 = f(0)` and `β_k = s_k - s_{k-1}`, where `s_k` is the slope of slice
//! `k`, makes the output the piecewise linear interpolant of the knots. Every
//! hidden slope is fixed to 1; only the products `β_k·λ_k` are identifiable.

use super::ActivationSpec;
use crate::error::{Error, Result};
use crate::netgraph::{Edge, Network, Role, Unit};

const KNOT_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone)]
pub struct Approximation {
    pub net: Network,
    /// Number of slices `N`.
    pub slices: usize,
    /// `max_k |f(k/N) - f((k-1)/N)|`, the achieved per-slice bound.
    pub max_slice_jump: f64,
    /// `β_0, β_1, ..., β_N`.
    pub output_weights: Vec<f64>,
}

/// Builds the interpolating network from knot samples `(k/N, f(k/N))`,
/// `k = 0..=N`, given in increasing order.
///
/// Fails if the knots are not equispaced on `[0, 1]`, if `N < 1`, or if some
/// slice jumps by `epsilon` or more.
pub fn construct_universal_approximator(
    samples: &[(f64, f64)],
    epsilon: f64,
) -> Result<Approximation> {
    if samples.len() < 2 {
        return Err(Error::Approximator(format!(
            "need at least 2 knots (N >= 1), got {}",
            samples.len()
        )));
    }
    if !(epsilon > 0.0) {
        return Err(Error::Approximator(format!("epsilon must be positive, got {epsilon}")));
    }
    let n = samples.len() - 1;
    let h = 1.0 / n as f64;
    for (k, &(x, y)) in samples.iter().enumerate() {
        let expect = k as f64 * h;
        if (x - expect).abs() > KNOT_TOLERANCE {
            return Err(Error::Approximator(format!(
                "knot {k} is at x={x}, expected {expect} (spacing 1/{n})"
            )));
        }
        if !y.is_finite() {
            return Err(Error::Approximator(format!("knot {k} has non-finite value {y}")));
        }
    }
    let max_slice_jump = samples
        .windows(2)
        .map(|w| (w[1].1 - w[0].1).abs())
        .fold(0.0, f64::max);
    if max_slice_jump >= epsilon {
        return Err(Error::Approximator(format!(
            "slices too coarse: max jump {max_slice_jump} is not below epsilon {epsilon}; increase N"
        )));
    }

    let slopes: Vec<f64> = samples
        .windows(2)
        .map(|w| (w[1].1 - w[0].1) * n as f64)
        .collect();
    let mut beta = Vec::with_capacity(n + 1);
    beta.push(samples[0].1);
    let mut prev = 0.0;
    for &s in &slopes {
        beta.push(s - prev);
        prev = s;
    }

    // ids: 0 input, 1 bias, 2..2+N hidden, N+2 output
    let out_id = n + 2;
    let mut units = vec![
        Unit::new(0, Role::Input, ActivationSpec::IDENTITY),
        Unit::new(1, Role::Bias, ActivationSpec::IDENTITY),
    ];
    let mut edges = Vec::with_capacity(3 * n + 1);
    for k in 1..=n {
        let id = k + 1;
        units.push(Unit::new(id, Role::Hidden, ActivationSpec::RELU));
        edges.push(Edge::new(0, id, 1.0));
        edges.push(Edge::new(1, id, -((k - 1) as f64) * h));
    }
    units.push(Unit::new(out_id, Role::Output, ActivationSpec::IDENTITY));
    edges.push(Edge::new(1, out_id, beta[0]));
    for k in 1..=n {
        edges.push(Edge::new(k + 1, out_id, beta[k]));
    }
    let net = Network::new(units, edges, false, 1)?;
    Ok(Approximation {
        net,
        slices: n,
        max_slice_jump,
        output_weights: beta,
    })
}

/// Piecewise linear interpolant of equispaced knots, evaluated at `x` in `[0, 1]`.
pub(crate) fn interpolate(samples: &[(f64, f64)], x: f64) -> f64 {
    let n = samples.len() - 1;
    let pos = (x * n as f64).clamp(0.0, n as f64);
    let k = (pos.floor() as usize).min(n - 1);
    let t = pos - k as f64;
    samples[k].1 + t * (samples[k + 1].1 - samples[k].1)
}

impl Approximation {
    /// Max |net(x) - interpolant(x)| over `points + 1` equispaced points.
    pub fn max_interpolation_error(&self, samples: &[(f64, f64)], points: usize) -> Result<f64> {
        let mut worst: f64 = 0.0;
        for i in 0..=points {
            let x = i as f64 / points as f64;
            let y = self.net.forward(&[x])?[0];
            worst = worst.max((y - interpolate(samples, x)).abs());
        }
        Ok(worst)
    }

    /// Max |net(x) - f(x)| over `points + 1` equispaced points.
    pub fn max_error_against(&self, f: impl Fn(f64) -> f64, points: usize) -> Result<f64> {
        let mut worst: f64 = 0.0;
        for i in 0..=points {
            let x = i as f64 / points as f64;
            let y = self.net.forward(&[x])?[0];
            worst = worst.max((y - f(x)).abs());
        }
        Ok(worst)
    }
}
