//! Batch Kalman Normalization and friends.
//!
//! A small double-precision deep-learning toolkit built around three
//! normalization layers (BN, BRN and BKN), with analytic backward passes,
//! finite-difference and high-precision oracles, and a micro-batch training
//! harness that decouples the number of samples used for normalization
//! statistics from the number averaged into each gradient step.

pub mod data;
pub mod experiment;
pub mod net;
pub mod norm;
pub mod tensor;
pub mod verify;

pub use tensor::{Shape4, Tensor, TensorError};
