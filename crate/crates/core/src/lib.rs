//! TricorNet: a temporal-convolutional encoder with a recurrent decoder for
//! per-frame action segmentation, built on a small reverse-mode autodiff
//! engine, together with segmental evaluation metrics and a synthetic
//! long-range-dependency benchmark.

pub mod autodiff;
pub mod data;
pub mod experiment;
pub mod gradcheck;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod tensor;
pub mod train;

pub use autodiff::{Gradients, Tape, Var};
pub use tensor::{Tensor, TensorError};
