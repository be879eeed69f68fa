//! Balancing of neural networks with homogeneous activations.
//!
//! Networks are directed graphs of units ([`netgraph`]). Hidden units with a
//! homogeneous activation can be rescaled without changing the network
//! function; [`balancing`] picks the scaling that minimizes a weight cost
//! ([`regularizer`]), and [`manifold`] characterizes the unique balanced
//! state those iterations converge to.

pub mod activations;
pub mod balancing;
pub mod cli;
pub mod error;
pub mod manifold;
pub mod netgraph;
pub mod regularizer;
pub mod training;

pub use activations::ActivationSpec;
pub use error::{Error, Result};
pub use netgraph::{Edge, Network, Role, Unit, UnitId};
pub use regularizer::{CostSpec, CostTerm};
