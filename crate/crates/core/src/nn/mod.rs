//! Minimal CPU tensor engine with explicit backward passes: dilated 3D
//! convolution, transposed-convolution upsampling, max pooling, rectifiers,
//! dropout, and the Adam optimizer.

mod adam;
mod conv;
mod ops;
mod params;
mod tensor;

pub use adam::Adam;
pub use conv::{Conv3d, ConvSpec, Upsample};
pub use ops::{apply_mask, dropout_inplace, max_pool, max_pool_backward, relu_backward, relu_inplace};
pub use params::{Gradients, ParamId, ParamStore};
pub use tensor::Tensor;
