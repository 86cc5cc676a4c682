//! Robust representation matching and the adversarial-training baselines it
//! is measured against, on a small `f64` autodiff core.
//!
//! Data parallelism goes through rayon when the `parallel` feature is on
//! (the default); without it every loop runs sequentially with identical
//! results.

// `!(x > 0.0)` style checks are deliberate: they reject NaN too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attacks;
pub mod bench;
pub mod data;
pub mod error;
pub mod models;
pub mod objectives;
pub mod par;
pub mod robustify;
pub mod tensor;
pub mod trainers;

pub use error::{Error, Result};
pub use tensor::Tensor;
