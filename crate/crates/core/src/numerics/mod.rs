//! Dense primitives and their hand-written gradient counterparts.
//!
//! Tensor-level functions validate shapes and return `Result`; the slice
//! kernels in [`linalg`] are the unchecked hot paths the attention and block
//! code build on.

pub mod activation;
pub mod conv;
pub mod linalg;
pub mod loss;
pub mod norm;
pub mod pool;
pub mod softmax;

pub use activation::{activation, activation_backward, sigmoid, silu, softplus, Activation};
pub use conv::{depthwise_causal_conv, depthwise_causal_conv_backward};
pub use linalg::{matmul, matmul_backward};
pub use loss::{cross_entropy, cross_entropy_backward, IGNORE_INDEX};
pub use norm::{l2_normalize, l2_normalize_backward, rmsnorm, rmsnorm_backward};
pub use pool::{mean_pool_chunks, mean_pool_chunks_backward};
pub use softmax::{softmax_row, softmax_row_backward};
