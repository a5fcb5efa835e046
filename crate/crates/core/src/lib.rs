//! Cell-free MIMO beamforming laboratory.
//!
//! The crate bundles a small reverse-mode differentiation core ([`diffnum`]),
//! synthetic channel generation ([`channel`]), exact rate and domain-gap
//! metrics ([`metrics`]), a WMMSE baseline ([`wmmse`]), the HGNet
//! convolutional beamformer ([`hgnet`]), online BN-affine adaptation
//! ([`oau`]) and experiment orchestration ([`harness`]).

#![allow(
    clippy::neg_cmp_op_on_partial_ord,
    clippy::needless_range_loop,
    clippy::too_many_arguments
)]

pub mod channel;
pub mod diffnum;
pub mod error;
pub mod harness;
pub mod hgnet;
pub mod linalg;
pub mod metrics;
pub mod oau;
pub mod rng;
pub mod wmmse;

pub use error::{Error, Result};
