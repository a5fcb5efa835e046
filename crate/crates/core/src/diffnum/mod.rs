//! Minimal differentiable numerics: dense tensors, the forward/backward
//! kernels the beamformer needs, a reverse-mode tape, parameter groups and
//! an adaptive-moment optimizer.

pub mod gradcheck;
pub mod ops;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, GradCheckReport};
pub use ops::{Activation, BnMode, ConvGeometry, ProjectionMode, RunningStats};
pub use params::{Adam, GroupTag, ParamGroup, ParamId, ParamStore};
pub use tape::{BatchStats, Gradients, OpKind, Tape, Var};
pub use tensor::{TensorC, TensorR};

/// Batch-norm stabilizer.
pub const BN_EPS: f64 = 1e-5;

/// Default gradient-reversal scale.
pub const GRL_LAMBDA: f64 = 1.0;
