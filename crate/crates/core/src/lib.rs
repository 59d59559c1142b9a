//! Numerical core of the earshot intrusive intelligibility predictor.
//!
//! Everything here is `no_std` + `alloc`: a small reverse-mode autodiff
//! engine, the attention blocks, the full predictor graph, listener
//! conditioning, training and evaluation metrics. File formats, feature
//! extraction from audio and the command line live in the `earshot` crate.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod attention;
pub mod conditioning;
pub mod dsp;
pub mod error;
pub mod experiments;
pub mod gradcheck;
pub mod graph;
pub mod model;
pub mod params;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use params::{ParamId, Parameter, ParameterStore};
pub use tensor::Tensor;
