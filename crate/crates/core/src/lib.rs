//! Direct alignment of depth and egomotion with photometric and learned
//! feature-metric losses.
//!
//! The crate is organised bottom-up:
//!
//! * [`raster`]: dense maps, bilinear sampling, derivative stencils, pyramids
//!   and PFM/PGM/CSV files.
//! * [`geometry`]: pinhole camera, axis-angle rigid motion, projective warping
//!   and its Jacobians.
//! * [`losses`]: photometric (L1 + SSIM), feature-metric, occlusion-aware
//!   cross-view loss with analytic depth/pose gradients, smoothness baselines
//!   and the single-view feature-learning terms.
//! * [`featurenet`]: a small convolutional autoencoder with hand-written
//!   backpropagation and Adam, trained on the single-view loss.
//! * [`synth`]: analytic ray-cast scenes with exact depth and pose.
//! * [`align`]: coarse-to-fine pose and depth optimization, loss landscapes
//!   and convergence-basin measurement.
//! * [`eval`]: depth metrics, median scaling and trajectory drift.
//!
//! The guide under `book/` walks through each piece; its code listings are
//! compiled and run as doc-tests of this crate.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod align;
pub mod error;
pub mod eval;
pub mod featurenet;
pub mod geometry;
pub mod losses;
pub mod raster;
pub mod synth;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    pub mod introduction {}
    #[doc = include_str!("../../../book/src/raster.md")]
    pub mod raster {}
    #[doc = include_str!("../../../book/src/geometry.md")]
    pub mod geometry {}
    #[doc = include_str!("../../../book/src/losses.md")]
    pub mod losses {}
    #[doc = include_str!("../../../book/src/featurenet.md")]
    pub mod featurenet {}
    #[doc = include_str!("../../../book/src/synth.md")]
    pub mod synth {}
    #[doc = include_str!("../../../book/src/align.md")]
    pub mod align {}
    #[doc = include_str!("../../../book/src/eval.md")]
    pub mod eval {}
}
