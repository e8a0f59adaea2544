//! Differentiable building blocks. Every layer is an explicit
//! forward/backward pair; there is no tape.

pub mod activation;
pub mod bilinear;
pub mod conv;
pub mod norm;
pub mod params;

pub use activation::{relu, relu_backward, sigmoid, softplus};
pub use bilinear::{bilinear_sample, BilinearTap};
pub use conv::{conv2d_backward, conv2d_forward, ConvSpec};
pub use norm::{instance_norm_backward, instance_norm_forward, InstanceNormCache, INSTANCE_NORM_EPS};
pub use params::{AffineParams, HasParams, LayerParams, ParamSlot};
