//! Plain ViT encoder that exposes every layer's token embeddings and
//! head-averaged attention.
//!
//! Blocks are pre-norm: `x + Attn(LN(x))`, then `x + MLP(LN(x))`. Teacher and
//! student share this architecture.

mod config;
mod forward;
pub mod params;
mod plan;

pub use config::ViTConfig;
pub use forward::{
    apply_lora, bind, embed_graph, encode_graph, forward_capture, forward_tokens, patch_tokens,
    patchify, EmbeddingCapture, GraphCapture,
};
pub use params::{AffineSite, LoraLayout, ParamKey, Slot, ViTParams, ViTWeights};
pub use plan::{count_total, count_trainable, TrainablePlan};
