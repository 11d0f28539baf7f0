//! Minimal differentiable arrays: a dense [`Tensor`], a recording [`Graph`]
//! with hand-written reverse passes, named parameters and the checkpoint
//! archive format.

pub mod graph;
pub mod nn;
pub mod params;
pub mod tensor;

pub use graph::{bce, sigmoid, Activation, Backward, Graph, Var, PROB_EPS};
pub use params::{Archive, Gradients, ParamGroup, ParamId, ParamStore, Parameter};
pub use tensor::Tensor;
