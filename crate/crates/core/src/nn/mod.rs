//! Dense tensors, reverse-mode gradients, layers and the optimizer.

pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod optim;
pub mod params;
pub mod rng;
pub mod tensor;

pub use gradcheck::{grad_check, GradCheckReport};
pub use graph::{Graph, Var};
pub use layers::{linear, time_embedding, time_embedding_batch, LayerNorm, Linear, Mlp, MultiHeadAttention};
pub use optim::{AdamW, AdamWConfig, CosineSchedule};
pub use params::{ParamId, ParamStore, Parameter};
pub use rng::RngStream;
pub use tensor::Tensor;
