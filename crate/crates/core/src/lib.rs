//! Memory-efficient multi-scale patch-based conditional GANs for 3D volumes.
//!
//! The pipeline generates a whole volume at low resolution, then refines it
//! scale by scale through constant-size patches conditioned on the previous
//! scale and on an edge sketch. Peak memory during refinement depends on the
//! patch size and network widths only, never on the output volume's side
//! length.
//!
//! Modules:
//! - [`volume`]: the `Volume3` scalar field, VOL1 file I/O, trilinear
//!   resampling and percentile normalization.
//! - [`sketch`]: gradient-magnitude-weighted 3D Canny edges plus label overlay.
//! - [`plan`]: the scale ladder and cross-scale patch coordinate algebra.
//! - [`nn`]: a minimal reverse-mode differentiable tensor core (3D convs,
//!   normalization, activations, Adam).
//! - [`models`]: the three network families and the adversarial objectives.
//! - [`train`]: per-scale adversarial training and full-cascade inference.
//! - [`memory`]: analytic memory estimation and runtime allocation tracking.
//! - [`metrics`]: 3D SSIM, PSNR, MAE, MSE and the paired t-test.
//! - [`phantom`]: a procedural two-domain phantom dataset.

pub mod error;
pub mod memory;
pub mod metrics;
pub mod models;
pub mod nn;
pub mod phantom;
pub mod plan;
pub mod sketch;
pub mod train;
pub mod volume;

pub use error::{Error, Result};
pub use volume::Volume3;
