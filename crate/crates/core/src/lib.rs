//! License-plate super-resolution toolkit.
//!
//! The crate provides a PixelShuffle-based restoration network with
//! attention gating, an OCR-aware perceptual loss, a degradation pipeline that
//! targets SSIM intervals, a synthetic plate renderer with a small trainable
//! OCR, and the evaluation/reporting harness that ties them together.

pub mod autograd;
pub mod baselines;
pub mod degrade;
pub mod error;
pub mod eval;
pub mod font;
pub mod gradcheck;
pub mod loss;
pub mod metrics;
pub mod network;
pub mod nn;
pub mod ocr;
pub mod params;
pub mod pixelops;
pub mod synthplate;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use pixelops::ImageTensor;
