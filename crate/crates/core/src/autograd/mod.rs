//! Minimal dense-tensor core with reverse-mode differentiation.
//!
//! Just enough machinery for a decoder-only transformer and the clipped
//! policy-gradient loss: matrix products, elementwise maps, row softmax,
//! RMS normalization, embedding lookup and cross-entropy, each with a
//! hand-derived backward verified by [`finite_diff_check`].

mod gradcheck;
mod graph;
pub mod kernels;
mod tensor;

pub use gradcheck::finite_diff_check;
pub use graph::{Graph, ValId};
pub use tensor::Tensor;
