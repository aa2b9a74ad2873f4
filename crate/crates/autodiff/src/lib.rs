//! Minimal reverse-mode automatic differentiation.
//!
//! Values live in [`Tensor`]s. A [`Graph`] records operations in the order
//! they are applied and replays them backwards exactly once to produce
//! gradients. Trainable weights are kept outside any graph in a
//! [`ParamSet`]; each forward pass binds them into a fresh graph, so
//! independent graphs can run on separate threads against the same
//! parameters.
//!
//! The layer set is deliberately small: dense and 2-D convolution layers,
//! pooling/upsampling for encoder-decoder nets, pointwise activations,
//! binary cross-entropy and normalized-error losses, a straight-through
//! top-k binarizer, and an escape hatch ([`LinearOp`]) for arbitrary
//! linear operators with a known adjoint.

mod check;
mod conv;
mod error;
mod graph;
pub mod ksf;
mod ops;
mod optim;
mod real;
mod tensor;

pub use check::gradient_check;
pub use error::AutodiffError;
pub use graph::{Gradients, Graph, LinearOp, Var};
pub use ops::top_k_with_forced;
pub use optim::{Adam, AdamConfig, Optimizer, RmsProp, RmsPropConfig};
pub use real::{DType, Real};
pub use tensor::{ParamSet, Parameter, Tensor};

pub type Result<T, E = AutodiffError> = std::result::Result<T, E>;
