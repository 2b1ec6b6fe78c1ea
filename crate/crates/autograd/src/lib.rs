//! Reverse-mode automatic differentiation over dense row-major tensors.
//!
//! The crate is deliberately small: a [`Graph`] records operations on
//! [`Var`] handles, [`Graph::backward`] returns [`Gradients`] keyed by the
//! [`ParamSet`] entries that were bound into the graph, and [`Adam`] applies
//! them. Every kernel is generic over [`Real`] so the same network code runs
//! in `f32` for training and in `f64` for finite-difference checks.
//!
//! Batch-level loops (convolutions, per-row reductions) go through
//! [`exec`], which dispatches to rayon when the `parallel` feature is on and
//! the runtime switch allows it. Both paths partition work identically, so
//! results are bit-identical regardless of the mode.

mod conv;
mod error;
pub mod exec;
mod graph;
mod optim;
mod params;
mod real;
mod tensor;

pub use conv::{conv2d_backward, conv2d_forward, conv_output_size, ConvGeometry};
pub use error::AutogradError;
pub use graph::{Graph, Var};
pub use optim::{Adam, AdamConfig};
pub use params::{Gradients, ParamSet};
pub use real::{gemm, Real};
pub use tensor::Tensor;

pub type Result<T, E = AutogradError> = std::result::Result<T, E>;
