//! Scale-wise (next-scale prediction) generative transformer, desk scale.
//!
//! An image is represented as a pyramid of token grids produced by residual
//! quantization against a shared codebook. A transformer predicts each scale's
//! tokens in parallel, conditioned on the accumulated reconstruction of the
//! coarser scales — either through a block-causal attention mask (the
//! autoregressive regime) or a block-diagonal one (the non-causal regime,
//! where prefix information enters only through the input feature maps).
//!
//! The crate covers the whole loop: a tensor/autodiff core with a
//! finite-difference oracle, the pyramid codec, the stabilized transformer,
//! guided sampling with a KV cache, teacher-forced training, and an
//! analysis/benchmark harness. The accompanying `book/` directory walks
//! through each concept; its code snippets are compiled as doc-tests.

pub mod error;
pub mod logging;
pub mod codec;
pub mod math;
pub mod rng;

mod booktests;

pub use error::{Error, Result};
