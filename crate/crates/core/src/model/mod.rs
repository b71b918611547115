//! A small decoder-only transformer trained by next-token prediction.
//!
//! Blocks are pre-norm: RMSNorm → causal multi-head attention with rotary
//! position embeddings → residual, then RMSNorm → SiLU-gated feed-forward →
//! residual. A final RMSNorm feeds an untied output projection. Everything
//! is `f64` with hand-written reverse-mode gradients so finite-difference
//! checks are meaningful.
//!
//! Positions are one-dimensional; image structure reaches the model only
//! through the indicator and end-of-line tokens in the sequence.

mod checkpoint;
mod forward;
mod loss;
mod optim;
mod params;

pub use checkpoint::{Checkpoint, CHECKPOINT_FORMAT_VERSION};
pub use forward::{AttentionProbe, ForwardCache};
pub use loss::{loss, Example, LossBreakdown};
pub use optim::{adamw_step, AdamWConfig, AdamWState};
pub use params::{ModelConfig, ModelParams};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("sequence of {needed} positions exceeds max_seq {max_seq}")]
    SeqOverflow { needed: usize, max_seq: usize },
    #[error("token id {id} at position {pos} outside vocabulary of {vocab}")]
    InvalidToken { id: u32, pos: usize, vocab: usize },
    #[error("targets, mask and logits disagree in length")]
    LengthMismatch,
    #[error("every position is masked out")]
    AllMasked,
    #[error("loss is not finite")]
    NonFiniteLoss,
    #[error("query position {query} outside sequence of {len}")]
    QueryOutOfRange { query: usize, len: usize },
    #[error("tensor shapes do not match")]
    ShapeMismatch,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
