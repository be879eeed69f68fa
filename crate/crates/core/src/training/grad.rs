//! Backpropagation over arbitrary unit graphs.

use serde::{Deserialize, Serialize};

use super::data::Dataset;
use crate::activations::{logistic, ActivationSpec};
use crate::error::{Error, Result};
use crate::netgraph::{Network, Role, UnitId};
use crate::regularizer::CostSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Loss {
    /// `½ Σ (y - t)²`.
    SquaredError,
    /// Softmax over the output activations, then `-log p_label`.
    CrossEntropy,
    /// Single output in `(0, 1)`; `-t log y - (1 - t) log(1 - y)`.
    BinaryCrossEntropy,
}

/// A weight cost added to the objective with a coefficient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Regularization {
    pub cost: CostSpec,
    pub coefficient: f64,
}

impl Regularization {
    pub fn new(cost: CostSpec, coefficient: f64) -> Self {
        Regularization { cost, coefficient }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    /// Mean data loss over the batch.
    pub data_loss: f64,
    /// `data_loss + coefficient·R`.
    pub objective: f64,
    /// Per edge, aligned with [`Network::edges`].
    pub weights: Vec<f64>,
}

impl Gradients {
    pub fn max_abs(&self) -> f64 {
        self.weights.iter().fold(0.0, |m, g| m.max(g.abs()))
    }
}

/// Rejects networks that gradient training cannot handle.
pub(crate) fn check_trainable(net: &Network, reg: Option<&Regularization>) -> Result<()> {
    if let Some(v) = net.validate().into_iter().find(|v| v.is_structural()) {
        return Err(Error::InvalidNetwork(v.to_string()));
    }
    for u in net.units() {
        if !u.activation.is_trainable() {
            return Err(Error::InvalidActivation(format!(
                "unit {}: {:?} has no usable derivative at 0",
                u.id, u.activation
            )));
        }
    }
    if let Some(r) = reg {
        if r.cost.min_exponent() < 1.0 {
            return Err(Error::CostSpec(format!(
                "cost '{}' has an exponent below 1 and no usable gradient",
                r.cost
            )));
        }
    }
    Ok(())
}

/// Loss and `dL/dz` for the output pre-activations.
fn output_loss(
    loss: Loss,
    acts: &[ActivationSpec],
    z: &[f64],
    y: &[f64],
    t: &[f64],
    label: Option<usize>,
    dz: &mut [f64],
) -> Result<f64> {
    match loss {
        Loss::SquaredError => {
            let mut l = 0.0;
            for k in 0..y.len() {
                let r = y[k] - t[k];
                l += 0.5 * r * r;
                dz[k] = r * acts[k].derivative(z[k]);
            }
            Ok(l)
        }
        Loss::CrossEntropy => {
            let label = label.ok_or_else(|| {
                Error::TrainConfig("cross_entropy needs class labels".into())
            })?;
            let m = y.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + y.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            for k in 0..y.len() {
                let p = (y[k] - lse).exp();
                let g = p - if k == label { 1.0 } else { 0.0 };
                dz[k] = g * acts[k].derivative(z[k]);
            }
            Ok(lse - y[label])
        }
        Loss::BinaryCrossEntropy => {
            if y.len() != 1 {
                return Err(Error::TrainConfig(format!(
                    "binary_cross_entropy needs one output, net has {}",
                    y.len()
                )));
            }
            let t = t[0];
            if acts[0] == ActivationSpec::Logistic {
                // softplus form, stable in z
                let z = z[0];
                let softplus = z.max(0.0) + (-z.abs()).exp().ln_1p();
                dz[0] = logistic(z) - t;
                Ok(softplus - t * z)
            } else {
                let y = y[0];
                if !(y > 0.0 && y < 1.0) {
                    return Err(Error::TrainConfig(format!(
                        "binary_cross_entropy output {y} is outside (0, 1)"
                    )));
                }
                dz[0] = (y - t) / (y * (1.0 - y)) * acts[0].derivative(z[0]);
                Ok(-t * y.ln() - (1.0 - t) * (1.0 - y).ln())
            }
        }
    }
}

/// Reusable buffers for repeated per-sample backpropagation on one network.
pub(crate) struct Backprop {
    order: Vec<UnitId>,
    inputs: Vec<UnitId>,
    outputs: Vec<UnitId>,
    hidden: Vec<UnitId>,
    out_acts: Vec<ActivationSpec>,
    values: Vec<f64>,
    z: Vec<f64>,
    delta: Vec<f64>,
    // recurrent: per step hidden pre-activations and unit values
    z_steps: Vec<Vec<f64>>,
    v_steps: Vec<Vec<f64>>,
    y: Vec<f64>,
    zo: Vec<f64>,
    dzo: Vec<f64>,
}

impl Backprop {
    pub(crate) fn new(net: &Network) -> Result<Self> {
        let order = if net.recurrent() {
            Vec::new()
        } else {
            net.topological_order()?
        };
        let outputs = net.output_units();
        let n_out = outputs.len();
        Ok(Backprop {
            order,
            inputs: net.input_units(),
            out_acts: outputs.iter().map(|&u| net.units()[u].activation).collect(),
            outputs,
            hidden: net.hidden_units(),
            values: vec![0.0; net.num_units()],
            z: vec![0.0; net.num_units()],
            delta: vec![0.0; net.num_units()],
            z_steps: Vec::new(),
            v_steps: Vec::new(),
            y: vec![0.0; n_out],
            zo: vec![0.0; n_out],
            dzo: vec![0.0; n_out],
        })
    }

    /// Outputs for one input, leaving unit values in the buffers.
    pub(crate) fn forward(&mut self, net: &Network, x: &[f64]) -> &[f64] {
        if net.recurrent() {
            self.forward_recurrent(net, x);
        } else {
            self.values.iter_mut().for_each(|v| *v = 0.0);
            for (&u, &xi) in self.inputs.iter().zip(x) {
                self.values[u] = xi;
            }
            for &u in &self.order {
                let unit = &net.units()[u];
                match unit.role {
                    Role::Input => {}
                    Role::Bias => self.values[u] = 1.0,
                    Role::Hidden | Role::Output => {
                        let z = net.pre_activation(u, &self.values);
                        self.z[u] = z;
                        self.values[u] = unit.activation.activate(z);
                    }
                }
            }
            for (k, &o) in self.outputs.iter().enumerate() {
                self.y[k] = self.values[o];
                self.zo[k] = self.z[o];
            }
        }
        &self.y
    }

    fn forward_recurrent(&mut self, net: &Network, x: &[f64]) {
        let mut v = vec![0.0; net.num_units()];
        for (&u, &xi) in self.inputs.iter().zip(x) {
            v[u] = xi;
        }
        if let Some(b) = net.bias_unit() {
            v[b] = 1.0;
        }
        self.z_steps.clear();
        self.v_steps.clear();
        self.v_steps.push(v.clone());
        for _ in 0..net.unroll_steps() {
            let mut z = vec![0.0; net.num_units()];
            let mut next = v.clone();
            for &h in &self.hidden {
                z[h] = net.pre_activation(h, &v);
                next[h] = net.units()[h].activation.activate(z[h]);
            }
            self.z_steps.push(z);
            self.v_steps.push(next.clone());
            v = next;
        }
        for (k, &o) in self.outputs.iter().enumerate() {
            self.zo[k] = net.pre_activation(o, &v);
            self.y[k] = self.out_acts[k].activate(self.zo[k]);
        }
    }

    /// Adds `scale·dL/dw` for one sample into `grad`; returns the sample loss.
    pub(crate) fn accumulate(
        &mut self,
        net: &Network,
        x: &[f64],
        t: &[f64],
        label: Option<usize>,
        loss: Loss,
        scale: f64,
        grad: &mut [f64],
    ) -> Result<f64> {
        self.forward(net, x);
        let l = output_loss(loss, &self.out_acts, &self.zo, &self.y, t, label, &mut self.dzo)?;
        if net.recurrent() {
            self.backward_recurrent(net, scale, grad);
        } else {
            self.delta.iter_mut().for_each(|d| *d = 0.0);
            for (k, &o) in self.outputs.iter().enumerate() {
                self.delta[o] = self.dzo[k];
            }
            for &u in self.order.iter().rev() {
                let unit = &net.units()[u];
                if unit.role == Role::Hidden {
                    let back: f64 = net
                        .out_edge_indices(u)
                        .iter()
                        .map(|&k| net.edges()[k].weight * self.delta[net.edges()[k].to])
                        .sum();
                    self.delta[u] = back * unit.activation.derivative(self.z[u]);
                }
                if matches!(unit.role, Role::Hidden | Role::Output) {
                    let d = self.delta[u];
                    if d != 0.0 {
                        for &k in net.in_edge_indices(u) {
                            grad[k] += scale * d * self.values[net.edges()[k].from];
                        }
                    }
                }
            }
        }
        Ok(l)
    }

    fn backward_recurrent(&mut self, net: &Network, scale: f64, grad: &mut [f64]) {
        let steps = self.z_steps.len();
        let v_last = &self.v_steps[steps];
        // d loss / d value, for hidden units at the current time step
        let mut dv = vec![0.0; net.num_units()];
        for (k, &o) in self.outputs.iter().enumerate() {
            let d = self.dzo[k];
            for &e in net.in_edge_indices(o) {
                let edge = &net.edges()[e];
                grad[e] += scale * d * v_last[edge.from];
                dv[edge.from] += edge.weight * d;
            }
        }
        for s in (0..steps).rev() {
            let z = &self.z_steps[s];
            let v_prev = &self.v_steps[s];
            let mut dv_prev = vec![0.0; net.num_units()];
            for &h in &self.hidden {
                let d = dv[h] * net.units()[h].activation.derivative(z[h]);
                if d == 0.0 {
                    continue;
                }
                for &e in net.in_edge_indices(h) {
                    let edge = &net.edges()[e];
                    grad[e] += scale * d * v_prev[edge.from];
                    dv_prev[edge.from] += edge.weight * d;
                }
            }
            dv = dv_prev;
        }
    }
}

/// Gradient of `mean_batch(E) + coefficient·R` with respect to every weight.
pub fn gradients(
    net: &Network,
    data: &Dataset,
    batch: &[usize],
    loss: Loss,
    reg: Option<&Regularization>,
) -> Result<Gradients> {
    check_trainable(net, reg)?;
    let mut bp = Backprop::new(net)?;
    batch_gradients(&mut bp, net, data, batch, loss, reg)
}

pub(crate) fn batch_gradients(
    bp: &mut Backprop,
    net: &Network,
    data: &Dataset,
    batch: &[usize],
    loss: Loss,
    reg: Option<&Regularization>,
) -> Result<Gradients> {
    let n_out = bp.outputs.len();
    let n_in = bp.inputs.len();
    if data.num_features() != n_in && !data.is_empty() {
        return Err(Error::DimensionMismatch {
            expected: n_in,
            got: data.num_features(),
        });
    }
    let mut grad = vec![0.0; net.edges().len()];
    let scale = if batch.is_empty() { 0.0 } else { 1.0 / batch.len() as f64 };
    let mut total = 0.0;
    for &i in batch {
        let t = data.target_vector(i, n_out);
        if t.len() != n_out {
            return Err(Error::DimensionMismatch {
                expected: n_out,
                got: t.len(),
            });
        }
        let label = data.labels().map(|l| l[i]);
        total += bp.accumulate(net, &data.inputs[i], &t, label, loss, scale, &mut grad)?;
    }
    let data_loss = total * scale;
    let mut objective = data_loss;
    if let Some(r) = reg {
        for (g, e) in grad.iter_mut().zip(net.edges()) {
            *g += r.coefficient * r.cost.subgradient(e.weight);
            objective += r.coefficient * r.cost.weight_cost(e.weight);
        }
    }
    Ok(Gradients {
        data_loss,
        objective,
        weights: grad,
    })
}

/// Mean data loss over the whole dataset.
pub fn dataset_loss(net: &Network, data: &Dataset, loss: Loss) -> Result<f64> {
    let all: Vec<usize> = (0..data.len()).collect();
    Ok(gradients(net, data, &all, loss, None)?.data_loss)
}
