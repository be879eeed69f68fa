use rand::Rng;

use super::{Edge, Network, Role, Unit, UnitId};
use crate::activations::ActivationSpec;

/// Half-width of the uniform initialization range for a `fan_in × fan_out` layer.
pub fn glorot_range(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// Builder for fully connected layered networks.
///
/// Unit ids are laid out as inputs, then the bias source (if any), then each
/// hidden layer, then the outputs.
#[derive(Debug, Clone)]
pub struct LayeredNet {
    widths: Vec<usize>,
    hidden: Vec<ActivationSpec>,
    output: ActivationSpec,
    bias: bool,
    range: Option<f64>,
}

impl LayeredNet {
    pub fn new(widths: &[usize]) -> Self {
        assert!(widths.len() >= 2, "need at least an input and an output layer");
        LayeredNet {
            widths: widths.to_vec(),
            hidden: vec![ActivationSpec::RELU; widths.len() - 2],
            output: ActivationSpec::IDENTITY,
            bias: false,
            range: None,
        }
    }

    pub fn hidden(mut self, act: ActivationSpec) -> Self {
        self.hidden = vec![act; self.widths.len() - 2];
        self
    }

    /// One activation per hidden layer.
    pub fn hidden_per_layer(mut self, acts: Vec<ActivationSpec>) -> Self {
        assert_eq!(acts.len(), self.widths.len() - 2);
        self.hidden = acts;
        self
    }

    pub fn output(mut self, act: ActivationSpec) -> Self {
        self.output = act;
        self
    }

    pub fn bias(mut self, bias: bool) -> Self {
        self.bias = bias;
        self
    }

    /// Draw every weight from `[-r, r]` instead of the per-layer Glorot range.
    pub fn uniform(mut self, r: f64) -> Self {
        self.range = Some(r);
        self
    }

    /// Unit ids per layer, input layer first.
    pub fn unit_layout(&self) -> Vec<Vec<UnitId>> {
        let mut next = 0;
        let mut layout = Vec::with_capacity(self.widths.len());
        for (l, &w) in self.widths.iter().enumerate() {
            layout.push((next..next + w).collect());
            next += w;
            if l == 0 && self.bias {
                next += 1;
            }
        }
        layout
    }

    pub fn bias_id(&self) -> Option<UnitId> {
        self.bias.then_some(self.widths[0])
    }

    pub fn build<R: Rng + ?Sized>(&self, rng: &mut R) -> Network {
        let layout = self.unit_layout();
        let last = self.widths.len() - 1;
        let mut units = Vec::new();
        for (l, ids) in layout.iter().enumerate() {
            for &id in ids {
                let (role, act) = if l == 0 {
                    (Role::Input, ActivationSpec::IDENTITY)
                } else if l == last {
                    (Role::Output, self.output)
                } else {
                    (Role::Hidden, self.hidden[l - 1])
                };
                units.push(Unit::new(id, role, act));
            }
            if l == 0 {
                if let Some(b) = self.bias_id() {
                    units.push(Unit::new(b, Role::Bias, ActivationSpec::IDENTITY));
                }
            }
        }
        let mut edges = Vec::new();
        for l in 1..=last {
            let r = self
                .range
                .unwrap_or_else(|| glorot_range(self.widths[l - 1], self.widths[l]));
            for &to in &layout[l] {
                for &from in &layout[l - 1] {
                    edges.push(Edge::new(from, to, draw(rng, r)));
                }
                if let Some(b) = self.bias_id() {
                    edges.push(Edge::new(b, to, draw(rng, r)));
                }
            }
        }
        Network::new(units, edges, false, 1).expect("layered layout is structurally valid")
    }
}

fn draw<R: Rng + ?Sized>(rng: &mut R, r: f64) -> f64 {
    loop {
        let w = rng.random_range(-r..=r);
        if w != 0.0 {
            return w;
        }
    }
}
