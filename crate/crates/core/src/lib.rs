//! Open-vocabulary object counting for aerial imagery.
//!
//! The pipeline conditions on a text prompt and optional visual exemplar
//! boxes, fuses general-vision pyramid features with an aerial-domain
//! feature map through cross-attention, selects the image tokens most
//! similar to the conditioning, decodes a token/prompt similarity matrix
//! and counts the tokens whose confidence clears a calibrated threshold.
//!
//! The crate also ships the surrounding machinery: a small f64 tensor
//! kernel with reverse-mode gradients, deterministic fixture encoders,
//! detection-to-counting dataset curation, loss and finetuning code, and
//! the evaluation harness (threshold calibration, MAE/RMSE reports,
//! density-binned error curves, confidence-map export).
//!
//! Data-parallel inner loops run on rayon when the `parallel` feature
//! (default) is enabled and fall back to sequential iteration otherwise;
//! both builds produce bit-identical results.

pub mod attention;
pub mod autodiff;
pub mod curation;
pub mod encoders;
pub mod error;
pub mod evaluation;
pub mod fixtures;
pub mod io;
pub mod model;
pub mod par;
pub mod pipeline;
pub mod tensor;
pub mod training;

#[cfg(test)]
mod testutil;

pub use error::{Error, Result};
pub use tensor::Tensor;
