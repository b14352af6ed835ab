//! Minimal reverse-mode autodiff and optimisation on dense `f64` tensors.

mod graph;
pub mod kernels;
mod optim;
mod params;
mod tensor;

pub use graph::{
    instance_stats, log_sum_exp, sigmoid, softmax_row, BatchStats, Gradients, Graph, NormMode,
    Var,
};
pub use optim::RmsProp;
pub use params::{Bound, ParamStore};
pub use tensor::Tensor;

#[cfg(test)]
mod gradcheck;
