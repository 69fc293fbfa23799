//! Flow-matching action policies with direct clean-action prediction,
//! gated multi-view token fusion, and a deterministic toy manipulation
//! benchmark for ablating both.
//!
//! The numeric core ([`nn`], [`flow`], [`g3t`]) is generic over [`Scalar`];
//! the benchmark runs in `f64` through the aliases below.

pub mod bench;
pub mod error;
pub mod flow;
pub mod g3t;
pub mod nn;
pub mod scalar;
pub mod world;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor64 = nn::Tensor<f64>;
pub type Graph64 = nn::Graph<f64>;
pub type ParamStore64 = nn::ParamStore<f64>;
pub type ActionChunk64 = flow::ActionChunk<f64>;
pub type FlowSample64 = flow::FlowSample<f64>;
