//! Low-bitwidth neural network training and inference.
//!
//! - [`bitkernel`]: bit-plane packing and popcount dot products / GEMM.
//! - [`quant`]: weight, activation and gradient quantizers with
//!   straight-through backward rules.
//! - [`engine`]: a feed-forward CNN with quantized forward and backward
//!   convolutions, ADAM, and checkpoints.
//! - [`fusion`]: threshold-table and code-domain fused paths.

pub mod bitkernel;
pub mod engine;
pub mod error;
pub mod fusion;
pub mod quant;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
