//! Toy encoder-only patch transformer for univariate forecasting, with a
//! multi-scale finetuning wrapper (scale adapters, per-scale LoRA, in-scale
//! attention masking, cross-scale aggregation and learned scale mixing).
//!
//! All model math is generic over [`Scalar`]; training runs in `f32` and
//! gradient checks in `f64`. Concrete aliases for both live at the crate root.

#[macro_use]
mod macros;

pub mod backbone;
pub mod checkpoint;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod msft;
pub mod multiscale;
pub mod numerics;
pub mod params;
pub mod scalar;
pub mod study;
pub mod training;

pub use error::{Error, Result};
pub use scalar::{DType, Scalar};

pub type Tensor32 = numerics::Tensor<f32>;
pub type Tensor64 = numerics::Tensor<f64>;
pub type Graph32 = numerics::Graph<f32>;
pub type Graph64 = numerics::Graph<f64>;
