//! Per-image routing through a gated multi-scale detection backbone.
//!
//! A multi-scale trellis of gated computation nodes picks a per-image
//! sub-network. Training combines a detection loss with a scale-aware
//! cost budget and a pairwise route-similarity regularizer.

pub mod autodiff;
pub mod budget;
pub mod config;
pub mod cost;
pub mod error;
pub mod head;
pub mod params;
pub mod route_export;
pub mod similarity;
pub mod synth;
pub mod supernet;
pub mod tensor;
pub mod train;

pub use autodiff::{CostScope, Gradients, Tape, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;
