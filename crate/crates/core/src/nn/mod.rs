//! Minimal CPU tensor engine: planar tensors, 3×3 convolutions and the
//! handful of layers the inpainter and feature extractors need, each with
//! an explicit reverse pass.

mod layers;
mod tensor;

pub(crate) use layers::{upsample2x, upsample2x_backward};
pub use layers::{Conv2d, ConvGrads, Layer, ParamGrads, Sequential};
pub use tensor::Tensor;
