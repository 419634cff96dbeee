//! Directionally routed transformer.
//!
//! Each attention head carries `K` learned unit directions. A small router
//! MLP shared by the heads of a layer reads the mean-pooled residual stream
//! and emits weights `r ∈ [0,1]^{H×K}`; each head output then has
//! `r_{h,k}`-scaled components along its directions removed before the
//! output projection.
//!
//! The crate bundles the model with a tape-based autodiff engine, a small
//! training loop, a declarative intervention layer and the measurement
//! procedures used to study where the model relies on routing.
//!
//! All numeric code is generic over [`Scalar`](numerics::Scalar); the
//! aliases below fix the two supported precisions.

pub mod analysis;
pub mod error;
pub mod interventions;
pub mod model;
pub mod numerics;
pub mod training;

pub use error::{Error, Result};

pub type Tensor32 = numerics::Tensor<f32>;
pub type Tensor64 = numerics::Tensor<f64>;
pub type Tape32 = numerics::Tape<f32>;
pub type Tape64 = numerics::Tape<f64>;
pub type RoutedLm32 = model::RoutedLm<f32>;
pub type RoutedLm64 = model::RoutedLm<f64>;
