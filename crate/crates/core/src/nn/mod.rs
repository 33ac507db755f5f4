//! A small CPU layer engine with explicit forward caches and hand-written
//! backward passes. Everything is generic over [`Real`] so that the same code
//! runs in `f32` for training and in `f64` for finite-difference checks.

pub mod attention;
pub mod conv;
pub mod grl;
pub mod init;
pub mod layers;
pub mod linalg;
mod real;
mod tensor;

pub use grl::GrlCoefficient;
pub use real::Real;
pub use tensor::{Grads, ParamSet, Tensor};
