//! A desk-scale multimodal model lab: a differentiable core, a miniature
//! vision-encoder + projector + decoder model, SFT and DPO objectives,
//! a synthetic visual question answering generator, a staged training
//! pipeline with encoder detach/freeze/reuse, and representation probes.

pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod graph;
pub mod image;
pub mod model;
pub mod objectives;
pub mod optim;
pub mod params;
pub mod pipeline;
pub mod tensor;

pub use error::{Error, Result};
pub use graph::{Gradients, Graph, Var};
pub use tensor::Tensor;
