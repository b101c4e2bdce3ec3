//! Lighting-robust 2D human pose estimation on synthetic paired captures.
//!
//! The crate bundles a dual-camera low-light simulator, homography alignment of
//! the paired views, a pose network with lighting-specific normalization, a
//! privileged-information style loss, an OKS-based evaluator and a domain-gap
//! analyzer. Everything runs on the CPU in `f64` and is deterministic given a
//! seed.

pub mod align;
pub mod analysis;
pub mod cli;
pub mod error;
pub mod eval;
pub mod graph;
pub mod image;
pub mod losses;
pub mod netcore;
pub mod synthgen;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
