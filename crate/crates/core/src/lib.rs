#![allow(clippy::neg_cmp_op_on_partial_ord)]
//! Low-light burst photography engine.
//!
//! The crate covers the whole capture-to-image path for dark scenes:
//! motion metering picks exposure time, gain and frame count; a tile-based
//! aligner and a motion-adaptive Fourier-domain merge denoise the raw burst;
//! a histogram illuminant estimator trained with an anisotropic reproduction
//! loss sets white balance; and a set of nighttime tone-mapping heuristics
//! renders the final sRGB image.
//!
//! Numeric code is generic over [`Real`] (`f32` or `f64`). The aliases at the
//! crate root fix the scalar to `f64`, which is what the pipeline uses.

pub mod awb;
pub mod burst_align;
pub mod burst_merge;
pub mod error;
pub mod motion_metering;
pub mod pipeline;
pub mod pnm;
pub mod raw_model;
pub mod scalar;
pub mod synth_oracle;
pub mod tonemap;

pub use error::{Error, Result};
pub use scalar::Real;

/// Pipeline scalar.
pub type Sample = f64;
pub type LinearImage = raw_model::LinearImage<Sample>;
pub type NoiseModel = raw_model::NoiseModel<Sample>;
