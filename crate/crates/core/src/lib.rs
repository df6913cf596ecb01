//! Convolutional residual memory networks.
//!
//! A residual CNN whose per-block outputs are read, shallowest first, by a
//! peephole LSTM. The LSTM's final hidden state is concatenated with the
//! CNN's global-pool output and fed to a softmax classifier.
//!
//! Modules, bottom up:
//! - [`tensor`]: dense tensors and the reverse-mode [`Tape`](tensor::Tape)
//! - [`layers`]: convolution, batch norm, pooling, dense
//! - [`resnet`]: 6n+2 residual trunk, plain ResNet classifier
//! - [`lstm`]: peephole LSTM cell
//! - [`crmn`]: the assembled model
//! - [`analysis`]: closed-form parameter and operation counts
//! - [`training`]: SGD, patience and round-robin learning-rate schedules
//! - [`data`]: CIFAR binary records, raw tensor container, preprocessing
//! - [`checkpoint`]: named tensor container

pub mod analysis;
pub mod checkpoint;
pub mod crmn;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod init;
pub mod layers;
pub mod lstm;
pub mod model;
pub mod params;
pub mod resnet;
pub mod tensor;
pub mod training;

pub use crmn::Crmn;
pub use error::{Error, Result};
pub use layers::Mode;
pub use model::Classifier;
pub use params::{Group, ParamStore};
pub use resnet::{NetworkConfig, ResNet, Shortcut, Variant};
pub use tensor::{Scalar, Tape, Tensor, Var};
