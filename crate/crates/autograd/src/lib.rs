//! Tape-free reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! Graphs are built implicitly by [`Var`] operations and evaluated with [`grad`].
//! Backward rules are expressed with the same differentiable operations, so
//! higher-order derivatives (for example a meta-gradient through several SGD
//! steps) come from calling [`grad`] with `create_graph = true` and differentiating
//! the result again.

pub mod finite_diff;
pub mod nn;
pub mod ops;
pub mod tensor;
pub mod var;

pub use ops::{Patch, SpatialMap};
pub use tensor::Tensor;
pub use var::{grad, is_grad_enabled, no_grad, Var};
