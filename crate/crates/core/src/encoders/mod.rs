//! Dual encoder: a causal caption transformer and a divided space-time video
//! transformer, each with hooks for prompt insertion.

mod blocks;
mod checkpoint;
mod config;
mod mask;
mod text;
mod video;

pub use blocks::{Attention, LayerNorm, Linear, Mlp};
pub use checkpoint::{Checkpoint, NamedArray, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{EncoderConfig, EOS, PAD, SOS};
pub use mask::{
    build_mask, spatial_visible, temporal_visible, AttentionMode, PromptSlots, TextLayout, Token,
    VideoLayout,
};
pub use text::{
    NoTextPrompts, StaticTextPrompts, TextBatch, TextEncoder, TextLayer, TextOutput, TextPrompter,
};
pub use video::{
    frame_context, PromptPack, VideoBatch, VideoEncoder, VideoLayer, VideoOutput, VideoPrompter,
};

#[cfg(test)]
mod tests;
