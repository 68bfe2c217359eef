//! The multi-class token encoder: patch embedding, `C` class tokens,
//! pre-norm transformer layers, the pooled class-token head and the
//! PatchCAM head.

mod checkpoint;
mod config;
mod forward;
mod params;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, write_atomic, CHECKPOINT_MAGIC,
};
pub use config::{HeadMode, ModelConfig, Variant};
pub use forward::{
    class_scores_from_tokens, embed, encode, forward, forward_graph, load_params, patch_cam_forward, patchify,
    AttentionStack, ForwardRecord, ForwardVars,
};
pub use params::{decays, expected_shapes, LayerParams, ModelParameters, ParamSet};
