#![allow(clippy::neg_cmp_op_on_partial_ord)]

//! Training-free ANN-to-SNN conversion with differential coding,
//! multi-threshold spiking neurons and graded units.

pub mod ann;
pub mod calibrate;
pub mod convert;
pub mod error;
pub mod graded;
pub mod manifest;
pub mod neuron;
pub mod par;
pub mod quadrature;
pub mod sim;
pub mod special;
pub mod tensor;
pub mod threshold;
pub mod toy;

pub use error::{Error, Result};
pub use tensor::Tensor;
