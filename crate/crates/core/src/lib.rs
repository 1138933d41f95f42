//! Conditional adaptive instance modulation (CAIM) for heterogeneous face
//! recognition.
//!
//! A frozen embedding network is adapted to a second imaging modality by
//! inserting small gated modulation blocks between its stages. The blocks
//! re-style the intermediate feature maps of target-modality inputs and are
//! bypassed exactly for source-modality inputs, so the original embeddings
//! are preserved. Only the block parameters are trained, with a Siamese
//! contrastive loss on cross-modality pairs.
//!
//! The crate carries everything needed to run that pipeline end to end on a
//! laptop CPU: a small reverse-mode autodiff engine ([`tape`]), the
//! normalization family ([`style_norm`]), the block itself ([`caim`]), a toy
//! backbone with insertion plans ([`network`]), the contrastive trainer
//! ([`trainer`]), biometric metrics ([`metrics`]), a seeded two-modality data
//! generator ([`synth`]), a checkpoint container ([`checkpoint`]) and the
//! experiment drivers behind the `caim` binary ([`experiment`]).

pub mod caim;
pub mod checkpoint;
pub mod error;
pub mod experiment;
mod kernels;
pub mod metrics;
pub mod network;
pub mod style_norm;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod trainer;

pub use crate::caim::{count_block_cost, BlockCost, BoundCaimBlock, CaimBlock, Gate};
pub use crate::error::{Error, Result};
pub use crate::tape::{ChannelStats, Gradients, Tape, Var};
pub use crate::tensor::Tensor;
