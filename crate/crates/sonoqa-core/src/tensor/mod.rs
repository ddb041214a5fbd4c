//! Dense tensors with reverse-mode differentiation.
//!
//! The engine is a Wengert tape: forward calls record one node per
//! operation (inputs always precede outputs, so the tape is topologically
//! ordered by construction) and [`Tape::backward`] replays it once in
//! reverse, accumulating vector-Jacobian products. Every public operation
//! checks its output for NaN/infinity and fails naming the op, which is
//! also how training divergence is diagnosed.

mod gradcheck;
mod graph;

pub use gradcheck::{grad_check, grad_check_multi};
pub use graph::{Tape, Tensor};
