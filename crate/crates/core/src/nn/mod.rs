//! Minimal reverse-mode autodiff and transformer layers used by every model in the crate.

pub mod gradcheck;
mod graph;
pub mod layers;
mod optim;
mod params;
mod scalar;
mod tensor;

pub use graph::{AttentionRecord, Graph, NodeId};
pub use optim::{AdamW, AdamWConfig};
pub use params::{Gradients, Init, ParamId, ParamStore};
pub use scalar::Real;
pub use tensor::Tensor;
