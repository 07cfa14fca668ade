//! Discrimination-aware channel pruning.
//!
//! Channels of each convolution are chosen greedily by the gradient norm of a
//! joint objective: feature-map reconstruction against a pre-trained baseline
//! plus the cross-entropy of an auxiliary classifier attached deeper in the
//! network. Selected weights are re-fit on a sample subset, and the network is
//! fine-tuned stage by stage.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod kernels;
pub mod loss;
pub mod network;
pub mod pipeline;
pub mod rng;
pub mod selector;
pub mod tensor;

pub use error::{Error, ErrorClass, Result};
pub use tensor::{Shape, Tensor};
