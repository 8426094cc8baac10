//! Data-free class visualization for differentiable image classifiers.
//!
//! Class impressions are synthesized by gradient ascent on a classifier's
//! pre-softmax logit for a chosen class. On top of the plain baseline this
//! crate implements:
//!
//! * an anisotropic total-variation prior applied as a separate descent step,
//! * a saliency-driven per-pixel learning rate built from accumulated,
//!   normalized input gradients,
//! * a growing circular mask centred on the most activated region, which
//!   restricts development to a single object,
//! * two-class fusion ("negative images") from two seed pixels.
//!
//! The built-in classifier in [`diffnet`] is a small convolutional network
//! trained on MNIST-scale data; the synthesis loops only depend on the
//! [`diffnet::Classifier`] trait.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod diffnet;
pub mod error;
pub mod idx;
pub mod image_core;
pub mod metrics_report;
pub mod region_mask;
pub mod saliency_lr;
pub mod synthesizer;
pub mod transforms;
pub mod tv_reg;

pub use error::{Error, Result};
pub use image_core::{Field, ImageTensor, PixelCoord, Shape};
