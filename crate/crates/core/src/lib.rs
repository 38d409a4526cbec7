//! LeViT: a hybrid convolution/attention image classifier.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`] dense BCHW tensors, forward kernels and a reverse-mode tape
//! * [`blocks`] patch embedding, attention with a translation-invariant bias,
//!   shrinking attention, the reduced MLP, drop path and the dual head
//! * [`model`] declarative specs, the preset family, construction and cost accounting
//! * [`fusion`] conv+BN folding and the weight archive
//! * [`trainer`] a synthetic dataset and SGD loop for learnability checks
//! * [`profile`] the single-threaded timing harness
//! * [`verify`] the property suite behind `levit verify`

pub mod blocks;
pub mod error;
pub mod fusion;
pub mod model;
pub mod profile;
pub mod tensor;
pub mod trainer;
pub mod verify;

use serde::{Deserialize, Serialize};

pub use error::{LevitError, Result};
pub use model::{preset, CostReport, Model, ModelSpec, StageSpec, SubsampleSpec};
pub use tensor::{Element, Tensor};

/// Whether batch statistics and drop path are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    #[default]
    Eval,
}
