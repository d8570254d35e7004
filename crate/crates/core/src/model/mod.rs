//! The MSC denoiser: a stack of two-branch layers between a patch embedding
//! and a linear head.

mod config;
mod embed;
mod forward;
mod params;

pub use config::{down_schedule, r_schedule, LayerConfig, ModelConfig, Patch};
pub use embed::{
    patched_shape, patchify, patchify_index, position_embedding, sinusoid, timestep_embedding,
    unpatchify, unpatchify_index,
};
pub use forward::{
    branch_gate, check_input, gate_forward, layer_key_sets, model_forward, msc_layer_forward,
    predict, timestep_inputs, Forward, FrameTimesteps, LayerGates,
};
pub use params::{BoundParams, BranchSlots, GateSlots, LayerSlots, ModelParams, ModelSlots};
