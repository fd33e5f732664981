//! Neural-network compression toolkit: iterative magnitude pruning and
//! per-channel affine quantisation on top of a small double-precision CNN
//! engine with standard, grouped, depthwise and pointwise convolutions.

mod codec;
pub mod conv;
pub mod cost;
pub mod data;
pub mod error;
pub mod nn;
pub mod prune;
pub mod quant;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{QTensor, Tensor};
