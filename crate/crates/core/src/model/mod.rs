//! The hybrid sequence model: two experts per layer routed by token mode,
//! joint attention over the full sequence, and affine heads for text logits
//! and latent velocities.

mod config;
mod decode;
mod forward;
mod params;

pub use config::{ModelConfig, Precision};
pub use decode::{decode_step_serial, finalize_block, velocity_pass, ForwardState, TrackKind};
pub use forward::{
    adaln_modulate, apply_rope, forward_graph, gqa_attention, qk_norm, rope_angles, swiglu_ffn,
    time_features, ForwardGraph, SegmentInput,
};
pub use params::{AdalnParams, ExpertParams, LayerParams, ModelParams};

/// Shared epsilon for every RMS normalization in the model.
pub const RMS_EPS: f64 = 1e-6;
