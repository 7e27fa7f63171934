//! Minimal numerical substrate: dense tensors, reverse-mode autodiff over a
//! dynamically built graph, dense and LSTM layers, and Adadelta.
//!
//! Everything is generic over [`Scalar`] (`f32` or `f64`); the `*64` aliases
//! below are the double-precision instantiations used for training.

pub mod adadelta;
pub mod checkpoint;
pub mod error;
pub mod graph;
pub mod layers;
pub mod params;
pub mod scalar;
pub mod tensor;

pub use adadelta::{clip_global_norm, Adadelta, Direction};
pub use checkpoint::Checkpoint;
pub use error::{Error, Result};
pub use graph::{Bound, Gradients, Graph, NodeId, Unary};
pub use layers::{uniform_init, Activation, Linear, LstmCell};
pub use params::{ParamId, ParamStore};
pub use scalar::{sigmoid, softplus, Scalar};
pub use tensor::{matmul, Tensor};

pub type Tensor64 = Tensor<f64>;
pub type Graph64 = Graph<f64>;
pub type ParamStore64 = ParamStore<f64>;
pub type Adadelta64 = Adadelta<f64>;
