//! Quantization-aware training with learned quantizer scales.
//!
//! The crate trains small networks under fake quantization — weights and
//! activations are mapped to a k-bit integer grid and back on every
//! forward pass — and exports the result as true integer weights. Three
//! pieces make low-bit training work:
//!
//! * a learned scaling factor per tensor (or per conv channel), updated
//!   by comparing quantization error at neighboring scales rather than by
//!   backpropagation;
//! * a differentiable arctangent soft round that replaces the
//!   round-plus-pass-through gradient during training;
//! * a correction term that scales gradients by the local discretization
//!   error so weights near code boundaries move decisively.
//!
//! Everything runs on a minimal reverse-mode autodiff engine over dense
//! f32 tensors ([`tensor::Tensor`]); no external ML framework is
//! involved. See the book under `book/` for a guided tour.

pub mod ablate;
pub mod config;
pub mod data;
pub mod error;
pub mod estimator;
pub mod export;
pub mod nn;
pub mod quant;
pub mod scale;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};

/// Every code block in the guide compiles and runs as a doc-test, so the
/// book cannot drift from the library.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/quantizer.md")]
    mod quantizer {}
    #[doc = include_str!("../../../book/src/soft-rounding.md")]
    mod soft_rounding {}
    #[doc = include_str!("../../../book/src/scale-learning.md")]
    mod scale_learning {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/export.md")]
    mod export {}
}
