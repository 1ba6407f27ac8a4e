//! Multi-input multi-output (MIMO) ensembles with feature unmixing.
//!
//! The crate bundles a small reverse-mode tensor engine ([`tape`]), the MIMO
//! wide-resnet ([`model`]), CutMix masks with the unmixing variants
//! ([`mask`]), the training harness ([`train`]) and the feature-sharing
//! measurements ([`diagnostics`]).

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod gradcheck;
mod kernels;
pub mod mask;
pub mod model;
pub mod optim;
pub mod params;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use mask::{MaskPair, UnmixMode};
pub use model::{InitMode, MimoConfig, MimoModel};
pub use rng::Rng;
pub use tensor::Tensor;
