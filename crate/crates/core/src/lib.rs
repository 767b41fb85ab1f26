//! Differentiable state estimation: Kalman filters as deterministic
//! computation graphs, trained end-to-end by backpropagation through time.
//!
//! The crate is organized around a small reverse-mode autodiff engine
//! ([`graph`]), filter cells built from its primitives ([`kalman`]),
//! convolutional observation encoders and estimator models ([`nets`]),
//! seeded synthetic worlds for tracking and ego-motion ([`worldsim`]),
//! and the staged training pipeline ([`training`]). Datasets and
//! checkpoints are stored in the checksummed [`pack`] container.

pub mod graph;
pub mod kalman;
pub mod linalg;
pub mod nets;
pub mod oracle;
pub mod pack;
pub mod tensor;
pub mod training;
pub mod worldsim;

pub use graph::{Gradients, NodeId, Tape};

pub use tensor::Tensor;
