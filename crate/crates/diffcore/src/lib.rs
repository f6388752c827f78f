//! Reverse-mode automatic differentiation over dense f64 tensors.
//!
//! A [`Graph`] is an eager Wengert tape: recording an operation computes its
//! value immediately and remembers enough to replay the chain rule backward.
//! [`Graph::backward`] turns a scalar loss node into per-leaf gradients with
//! a single reverse sweep; fan-out accumulates, disconnected leaves come back
//! as exact zeros.
//!
//! The op set covers what a small transformer + MLP stack and distribution
//! algebra need: matmul, broadcast elementwise arithmetic, the usual
//! activations, trig, sqrt/square, axis reductions (max/min break ties toward
//! the first index), concat/slice/broadcast, softmax, layer norm, and row
//! lookup. Sampling enters through constant noise leaves so reparameterized
//! draws differentiate exactly.
//!
//! [`check`] provides the central finite-difference oracle used by the test
//! suites.

mod error;
mod graph;
mod tensor;

pub mod check;

pub use error::DiffError;
pub use graph::{Gradients, Graph, NodeId};
pub use tensor::{broadcast_shape, reduce_to_shape, strides_for, Tensor};
