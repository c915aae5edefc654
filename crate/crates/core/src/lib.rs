//! Token-level hybrid attention.
//!
//! Every chunk of `C` tokens is routed, per head group, to either causal
//! softmax attention or a Gated DeltaNet linear-attention head. Routing comes
//! from a mean-pool + linear score layer and is trained with straight-through
//! gradients: the softmax path contributes the column sums of its mask
//! gradient, the linear path the inner product of the state adjoint with the
//! chunk's state contribution.
//!
//! The crate is `no_std` (it needs `alloc`) and does no IO. The companion
//! `hybrid-attn` crate carries the CLI, config files, and checkpoints.
//!
//! Layout:
//! - [`numerics`]: dense primitives with hand-written gradients.
//! - [`attn`]: chunked softmax attention with a column-wise routing mask.
//! - [`gdn`]: Gated DeltaNet, recurrent reference and chunkwise kernel.
//! - [`router`]: score layer, argmax routing, straight-through backward.
//! - [`block`]: the token-mixer block wiring both paths together.
//! - [`model`], [`train`], [`task`]: a small language model and its training.
//! - [`infer`]: prefill and token-by-token decoding with routing-aware caches.
//! - [`flops`]: multiply-add accounting and the analytic cost model.

#![no_std]
#![allow(
    clippy::too_many_arguments,
    clippy::needless_range_loop,
    clippy::type_complexity
)]

extern crate alloc;

pub mod attn;
pub mod block;
pub mod error;
pub mod flops;
pub mod gdn;
pub mod infer;
pub mod model;
pub mod numerics;
pub mod params;
pub mod real;
pub mod router;
pub mod stats;
pub mod task;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use params::ParamStore;
pub use real::Real;
pub use router::{ChunkRouting, Route};
pub use tensor::Tensor;
