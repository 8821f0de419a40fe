//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! Computations are recorded eagerly on a [`Graph`]; a scalar node can then be
//! differentiated with [`Graph::backward`]. Model weights live in
//! [`ModelParams`], which binds into a graph and serializes to the `SFWT`
//! container.

mod graph;
mod kernels;
mod optim;
mod params;
mod tensor;

pub use graph::{eval_primitive, Gradients, Graph, NodeId, OpKind, LAYER_NORM_EPS};
pub use optim::{sgd_step, AdamW, Optimizer, OptimizerKind};
pub use params::{Binding, CodecError, ModelParams, NamedGrads, SFWT_MAGIC, SFWT_VERSION};
pub use tensor::{Result, Tensor, TensorError};
