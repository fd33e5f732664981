//! Layers, networks and the `CKNN` model format.

pub mod format;
pub mod layer;
pub mod loss;
pub mod network;

pub use layer::{BatchNorm, Cache, Conv, Dense, Layer, Mask, Mode, Param, SeparableConv};
pub use loss::{argmax_rows, softmax, softmax_cross_entropy};
pub use network::{ArchTag, ForwardPass, Gradients, Network};
