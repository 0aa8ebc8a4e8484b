//! Pure tensor kernels. Each forward has a matching backward; the
//! [`Tape`](crate::autograd::Tape) wires them into a differentiable graph.

pub mod activation;
pub mod conv;
pub mod layout;
pub mod linalg;
pub mod norm;
pub mod pool;
pub mod softmax;

pub use activation::{activate, Activation};
pub use conv::{conv3d, conv3d_backward, conv3d_output_dims, Conv3dSpec, ConvAlgo};
pub use layout::{permute, scale_channels};
pub use linalg::{linear, matmul};
pub use pool::{adaptive_avg_pool, maxpool3d, PoolTarget};
pub use softmax::{cross_entropy, softmax};
