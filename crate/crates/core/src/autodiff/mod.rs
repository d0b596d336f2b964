//! Minimal reverse-mode automatic differentiation over dense tensors.

mod gradcheck;
mod graph;
mod params;
mod tensor;

pub use gradcheck::{grad_check, GradCheckReport};
pub use graph::{Gradients, Graph, Var, LAYER_NORM_EPS};
pub use params::{AdamConfig, Param, ParamId, ParamStore};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
