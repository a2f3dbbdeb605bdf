//! Desk-scale federated self-supervised learning simulator with the
//! hallucinated-positive backdoor attack, dual-level constrained poisoning,
//! robust aggregation defenses, and downstream evaluation.
//!
//! Numerical kernels are generic over [`Real`] (`f32` or `f64`); the
//! experiment pipeline runs in `f64` through the aliases below.

pub mod config;
pub mod data;
pub mod defenses;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod federation;
pub mod gradcheck;
pub mod hallucination;
pub mod kmeans;
pub mod linalg;
pub mod losses;
pub mod poisoning;
pub mod rng;
pub mod scalar;

pub use error::{FsslError, Result};
pub use scalar::Real;

pub type Vector = linalg::Vector<f64>;
pub type UnitVector = linalg::UnitVector<f64>;
pub type ModelParams = encoder::ModelParams<f64>;
pub type EncoderPair = encoder::EncoderPair<f64>;
pub type MemoryQueue = losses::MemoryQueue<f64>;
pub type GradStats = poisoning::GradStats<f64>;
