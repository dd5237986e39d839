//! Federated adversarial-training simulator.
//!
//! Desk-scale building blocks for studying evasion robustness in federated
//! learning: a dense network engine with input gradients, gradient-based
//! attacks (FGSM, PGD, MIM) and a boundary-distance probe, defense losses
//! (PGD-AT, ALP, TRADES, and boundary-weighted training with global-model
//! regularization), non-IID partitioners, a FedAvg/FedProx round loop, and
//! an evaluation harness.

pub mod attacks;
pub mod data;
pub mod error;
pub mod eval;
pub mod exec;
pub mod federation;
pub mod gradcheck;
pub mod losses;
pub mod nn;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
