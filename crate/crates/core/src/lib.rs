//! Feature-augmented Gaussian splatting for feed-forward novel-view synthesis.
//!
//! The crate holds the scene types and projective math ([`gscene`]), a
//! differentiable tile rasterizer ([`rasterizer`]), the dual-domain detail
//! module ([`detailmod`]), the multi-view transformer backbone
//! ([`backbone`]), the one-step refiner ([`refiner`]) and the loss suite
//! ([`losses`]). Everything learnable is built on [`diffcore`] tensors and
//! stored in a [`nn::ParamStore`].

pub mod backbone;
pub mod detailmod;
pub mod error;
pub mod gscene;
pub mod losses;
pub mod nn;
pub mod rasterizer;
pub mod refiner;

pub use error::{Error, Result};
