//! Synthetic retrieval tasks, evaluation harnesses and the trainer that
//! produces models able to solve them.

mod eval;
mod tasks;
pub mod tokenizer;
mod train;

pub use eval::{corpus_chunks, eval_lm, eval_retrieval, lm_trace, retrieval_outcomes, EvalResult};
pub use tasks::{gen_needle, gen_passkey, needle_answer, RetrievalSample, RetrievalTask, PASSKEY_FILLER};
pub use tokenizer::{detokenize, tokenize, VOCAB_SIZE};
pub use train::{clip_grad_norm, make_batch, train, Adam, TrainConfig, TrainOutcome, TrainTask};

use crate::kv_cache::CompressionConfig;

/// Fills the special and punctuation token sets used by the rule-based
/// retention policy.
pub fn with_token_classes(mut config: CompressionConfig) -> CompressionConfig {
    config.special_token_ids = tokenizer::special_set();
    config.punctuation_token_ids = tokenizer::punctuation_set();
    config
}
