//! Micro decoder-only transformer: character tokenizer, taped and
//! incremental forward passes, and seeded sampling.

mod config;
mod forward;
mod infer;
mod params;
mod sample;
mod tokenizer;

pub use config::ModelConfig;
pub use forward::{forward_logits, logits_nograd, ParamLeaves};
pub use infer::{DecodeState, Decoder};
pub use params::{LayerParams, ModelParams};
pub use sample::{generate, GenConfig};
pub use tokenizer::{TokenId, Tokenizer, DEFAULT_VOCAB, EOT_ID, PAD_ID};
