//! Primitive differentiable ops. Every op records its vector-Jacobian product
//! on the tape when an input requires a gradient.

mod elementwise;
mod linalg;
mod nn;
mod reduce;
mod select;
mod shape;

pub use nn::Padding;
pub use select::TopK;
