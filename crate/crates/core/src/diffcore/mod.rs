//! Dense tensors, a single-use reverse-mode graph, and SGD with momentum.
//!
//! A [`Graph`] records each primitive as it is evaluated. Leaves created
//! with [`Graph::param`] receive gradients from [`Graph::backward`]; this
//! includes inputs, which is how input perturbation for ODIN gets its
//! gradient.

mod graph;
mod optim;
mod tensor;

pub use graph::{Gradients, Graph, Var};
pub(crate) use graph::log_sum_exp;
pub use optim::{sgd_step, OptimizerState, Param, SgdConfig};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
