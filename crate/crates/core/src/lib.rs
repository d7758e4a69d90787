//! Desk-scale reinforcement learning from verifiable rewards.
//!
//! A self-contained CPU implementation of LoRA-adapted transformer
//! fine-tuning with group-relative policy optimization against
//! correctness/format rewards on math word problems, plus the evaluation
//! harness and GPU memory-budget accounting that go with it.

pub mod autograd;
pub mod data;
pub mod error;
pub mod evalharness;
pub mod gradcheck;
pub mod grpo;
pub mod lora;
pub mod membudget;
pub mod model;
pub mod rewards;
pub mod seeds;
pub mod trainer;

pub use error::{Error, Result};
