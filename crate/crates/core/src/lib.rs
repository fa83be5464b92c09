//! ExpressNet-MoE: multi-branch convolutional feature extraction fused
//! through top-k gated mixture-of-experts routing, built on a from-scratch
//! reverse-mode autodiff engine.
//!
//! The crate is generic over the scalar type (see [`scalar::Scalar`]):
//! training runs in `f32`, the finite-difference gradient checker runs the
//! exact same code in `f64`. Concrete aliases for the common instantiations
//! live at the crate root.

pub mod error;
pub mod extract;
pub mod gradcheck;
pub mod kernels;
pub mod layers;
pub mod model;
pub mod moe;
pub mod params;
pub mod rng;
pub mod scalar;
pub mod shape;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use rng::Rng;
pub use scalar::Scalar;
pub use shape::Shape;
pub use tape::{Mode, Padding, Tape, ValueId};
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Tape32 = Tape<f32>;
pub type Tape64 = Tape<f64>;
pub type ParamStore32 = params::ParamStore<f32>;
pub type ParamStore64 = params::ParamStore<f64>;
