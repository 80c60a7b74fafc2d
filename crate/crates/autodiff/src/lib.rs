//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Graph`] records one forward pass. Each op stores its output value
//! together with whatever its backward rule needs, and [`Graph::backward`]
//! sweeps the tape in reverse from a scalar loss. Model weights live in a
//! [`ParamStore`]; binding a store onto a graph turns trainable parameters
//! into leaves and frozen ones into constants, so frozen weights never
//! receive gradients or updates.

mod error;
mod graph;
mod kernels;
mod optim;
mod param;
mod tensor;

pub use error::{AutodiffError, Result};
pub use graph::{ClampGrad, Gradients, Graph, Var};
pub use optim::{Adam, Optimizer, Sgd};
pub use param::{Binding, ParamId, ParamStore, Parameter};
pub use tensor::Tensor;
