//! Reverse-mode autodiff, formal-language tasks, differentiable stack and
//! tape memories, the recurrent and Transformer models built on them, and
//! the training / evaluation harness.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`). Training runs
//! in `f32`; gradient and discrete-limit checks use `f64`.

pub mod autodiff;
pub mod error;
pub mod harness;
pub mod introspection;
pub mod memory;
pub mod models;
pub mod scalar;
pub mod tasks;
pub mod verify;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor32 = autodiff::Tensor<f32>;
pub type Tensor64 = autodiff::Tensor<f64>;
pub type Graph32 = autodiff::Graph<f32>;
pub type Graph64 = autodiff::Graph<f64>;
pub type ParamStore32 = autodiff::ParamStore<f32>;
pub type ParamStore64 = autodiff::ParamStore<f64>;
pub type Model32 = models::Model<f32>;
pub type Model64 = models::Model<f64>;
