//! The MoDL network: invertible residual CNN regularizer, CG data
//! consistency, the N-unroll forward pass and the two layer inversions.

mod checkpoint;
mod dc;
mod network;
mod regularizer;

pub use checkpoint::{
    load_checkpoint, save_checkpoint, CheckpointManifest, TensorEntry, CHECKPOINT_FILE, CHECKPOINT_FORMAT,
};
pub use dc::{
    conjugate_gradient, dc_forward, dc_invert, dc_vjp, CgReport, DcConfig, DcLayer, DEFAULT_CG_TOL, DEFAULT_MU,
    DEFAULT_N_CG,
};
pub use network::{
    modl_forward, modl_forward_iterates, modl_forward_recorded, unroll_step, CaseContext, NetConfig, NetVars,
    ParamGrads, UnrolledNetParams,
};
pub use regularizer::{
    circular_conv_norm, ConvLayer, InversionReport, ProjectionOutcome, RegularizerConfig, RegularizerParams,
    RegularizerVars, DEFAULT_INVERT_MAX_ITER, DEFAULT_INVERT_TOL, POWER_ITERATIONS, PROJECTION_TARGET,
    PROJECTION_TRIGGER,
};
