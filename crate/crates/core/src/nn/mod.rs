//! Minimal CPU autodiff engine used by every trainable model in the crate.

mod graph;
pub mod layers;
mod optim;
mod params;
mod tensor;

pub use graph::{Gradients, Graph, Var};
pub use optim::{clip_global_norm, AdamW};
pub use params::{kaiming_normal, normal, ParamId, ParamStore};
pub use tensor::{gemm, Element, MatRef, Tensor};
