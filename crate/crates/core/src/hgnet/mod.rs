//! Dimension-preserving convolutional beamformer with adversarial
//! sensitive-feature dropout.
//!
//! The channel magnitudes form a `Q x I x MN` image. `L` conv/BN/activation
//! layers keep the `Q x I` extent, so one set of weights serves any network
//! size. After every layer but the last, a discriminator guesses the channel
//! class from pooled features through a gradient-reversal layer, and the
//! features that help it most are dropped by weighted random sampling during
//! training. The last layer's `2M` planes plus a residual of the input become
//! real and imaginary beam parts, projected onto the per-AP power budget.

mod checkpoint;
mod config;
mod model;
mod module;
mod train;

pub use checkpoint::{from_bytes, load_checkpoint, save_checkpoint, to_bytes, CHECKPOINT_VERSION};
pub use config::{
    ensure_valid, preserving_padding, validate_architecture, HGNetConfig, LayerSpec, TrainConfig, Violation,
};
pub use model::{calibrate, forward, infer, DiscParams, ForwardTrace, HGNetParams, LayerParams, LayerTrace, Mode};
pub use module::{
    apply_mask, assemble_output, discriminator_loss, drop_probs, feature_scores, input_transform, mask_from_keys,
    residual_matrix, wrs_mask, SCORE_FLOOR,
};
pub use train::{train, TrainReport};

pub use crate::metrics::rate_loss_grad;

pub(crate) use model::{build, Objective, Pass};
