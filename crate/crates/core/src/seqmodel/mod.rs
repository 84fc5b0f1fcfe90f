//! Decoder-only causal language model.

pub mod lm;
pub mod transformer;
pub mod vocab;

pub use lm::{mle_train, perplexity, top_k_ids, CausalLm, GenerationConfig, TrainConfig, TrainLog};
pub use transformer::{KvCache, TransformerConfig, Trunk};
pub use vocab::{Vocab, BOS, PAD};
