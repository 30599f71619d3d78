//! Softmax, linear and magnitude-aware linear attention (MALA) kernels in
//! double precision, together with the tooling used to probe them: ratio and
//! scaling analysis, an analytic MALA backward pass with a finite-difference
//! checker, scaling benchmarks and a command-line front end.
//!
//! All matrices are dense and row-major. Every mechanism is self-attention
//! over `N` tokens; queries, keys and values share the token count.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod ablation;
pub mod analysis;
pub mod attention;
pub mod bench;
pub mod cli;
pub mod error;
pub mod grad;
pub mod kernels;
pub mod numerics;
pub mod sampling;

pub use attention::{AttentionOutput, Mechanism, MultiHeadConfig};
pub use error::{Error, Result};
pub use kernels::KernelKind;
pub use numerics::Matrix;
