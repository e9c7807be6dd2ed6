//! Decoder-only transformer: configuration, weights, cached decoding and a
//! trainable full-sequence pass.

pub mod attention;
pub mod checkpoint;
mod config;
pub mod decode;
pub mod forward;
pub mod layers;
pub mod rope;
mod weights;

pub use attention::{attention_head, multi_head_merge, project_qkv};
pub use config::{kv_memory_bytes, kv_memory_bytes_raw, ModelConfig};
pub use decode::{
    argmax, decode_step, greedy_generate, prefill, prefill_into, AttentionRecord, DecodeState,
    HeadAttention,
};
pub use forward::{cross_entropy, forward_logits, forward_train};
pub use rope::apply_rope;
pub use weights::{LayerWeights, Model, ModelWeights, INIT_STD, LAYER_PARAM_NAMES};
