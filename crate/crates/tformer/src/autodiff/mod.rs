//! Reverse-mode automatic differentiation over dense arrays.

pub mod linalg;
pub mod scalar;

pub use scalar::Scalar;
