//! Minimal reverse-mode differentiation over dense row-major matrices,
//! plus the Adam optimizer with decoupled weight decay.

mod checkpoint;
mod error;
mod graph;
mod optim;
mod params;
mod tensor;

pub use checkpoint::{ParamCheckpoint, ParamRecord};
pub use error::AutodiffError;
pub use graph::{AttentionSpec, Graph, NodeId, LAYER_NORM_EPS};
pub use optim::{AdamConfig, AdamW};
pub use params::{Init, Param, ParamId, ParamStore};
pub use tensor::{Real, Shape, Tensor};

pub(crate) use graph::rope_in_place;

#[cfg(test)]
mod tests;
