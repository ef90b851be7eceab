//! The spatio-temporal lifting network.
//!
//! Per frame, the `J×2` joints are embedded to `J×D` and run through the
//! spatial blocks (attention over joints, then the cross-joint module). The
//! per-frame outputs are flattened and stacked to `F×(J·D)`, run through the
//! temporal blocks (attention over frames, then the cross-frame module) and
//! pooled by the regression head into one `J×3` pose for the center frame.

mod config;
mod layers;
mod params;

pub use config::{AttentionScale, CfiProjection, HeadNorm, ModelConfig};
pub use layers::{
    cfi, cji, embed_joints, forward, linear, mlp, multi_head_attention, predict, regression_head,
    spatial_block, spatial_stage, temporal_block, AttentionVars, CfiVars, CjiVars, HeadVars, Linear,
    MlpVars, ModelVars, Norm, SpatialBlockVars, TemporalBlockVars,
};
pub use params::{
    is_interaction_slot, param_count, param_ledger, Init, ModelParams, ParamSlot, SlotSpec, INIT_STD,
};
