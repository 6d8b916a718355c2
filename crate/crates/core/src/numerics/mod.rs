//! Dense kernels and the deterministic random number generator.
//!
//! Everything here is single-threaded and pure; callers that want data
//! parallelism dispatch whole independent jobs through [`crate::par`].

mod kernels;
mod matrix;
mod rng;

pub use kernels::{
    gelu, gelu_grad, layer_norm, log_sum_exp, softmax_in_place, softmax_rows, LN_EPS,
};
pub(crate) use kernels::{layer_norm_rows, LayerNormOut};
pub(crate) use matrix::{gemm, Layout};
pub use matrix::{Matrix, Scalar};
pub use rng::{Rng, Stream};
