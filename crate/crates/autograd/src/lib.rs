//! A compact reverse-mode automatic differentiation tape.
//!
//! Tensors are `ndarray::ArrayD` values in standard (row-major) layout. Image
//! tensors use NHWC order so that 1×1 convolutions and linear layers are plain
//! matrix products over the trailing channel axis.
//!
//! A [`Graph`] is built fresh for every forward pass. Parameters live in a
//! [`ParamStore`] that outlives the graph; [`Graph::backward`] returns the
//! gradients for every parameter that took part in the pass.

mod graph;
mod ops;
mod params;
mod real;

pub mod gradcheck;
pub mod nn;
pub mod optim;

pub use graph::{Backward, BackwardCtx, Grads, Graph, Var};
pub use ops::attention::AttentionSpec;
pub use ops::shape::GATHER_ZERO;
pub use params::{ParamId, ParamStore};
pub use real::Real;
