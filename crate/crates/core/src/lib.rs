//! Latent-state learning for haptic sequences and offline Q-learning of plan
//! phase transitions, with a detent-knob simulator for data and evaluation.
//!
//! The model modules are generic over [`numkit::Scalar`]; the `*64` aliases
//! are the double-precision instantiations used by the pipeline.

pub mod detentsim;
pub mod elbo;
pub mod error;
pub mod genmodel;
pub mod pipeline;
pub mod qcontrol;
pub mod recognition;
pub mod sequence;

pub use error::{Error, Result};

pub type GenerativeModel64 = genmodel::GenerativeModel<f64>;
pub type RecognitionNet64 = recognition::RecognitionNet<f64>;
pub type GaussianDiag64 = genmodel::GaussianDiag<f64>;
