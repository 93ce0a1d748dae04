//! Dense `f64` arrays and a reverse-mode differentiation tape.

mod array;
mod graph;

pub use array::Tensor;
pub use graph::{Gradients, Graph, Var, ARCCOS_CLAMP, ARCCOS_DOMAIN_SLACK};

pub(crate) use graph::clamp_cos;
