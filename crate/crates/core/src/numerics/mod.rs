//! Dense math, small feedforward networks with hand-derived backward
//! passes, and the Adam optimizer.

mod adam;
mod gemm;
mod mlp;
mod params;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use mlp::{backprop, backprop_with_loss, loss_value, Activation, Arch, ForwardCache, Head, Loss, Mlp, Targets};
pub use params::{ParamVector, Segment};
