#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
#[cfg(test)]
mod testutil;
pub mod audio;
pub mod tensor;
pub mod vq;
pub mod networks;
pub mod adversarial;
pub mod training;
pub mod config;

pub use error::{Error, Result};
pub use tensor::{Gradients, Tape, Tensor, Var};
pub use audio::{FeatureConfig, FeatureMatrix, FeatureSet, Waveform};
pub use config::RunConfig;
pub use networks::Variant;
pub use training::{AvPair, Checkpoint, Model, ModelConfig, TrainConfig};
