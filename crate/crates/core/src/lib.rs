//! Volumetric classification with a hybrid CNN + Transformer-fusion model.
//!
//! The crate provides, bottom to top:
//! - `tensor`: a dense tensor engine with reverse-mode autodiff,
//! - `backbone`: a configurable 3-D residual network,
//! - `encoder`: patch embedding, the fusion Transformer encoder, and the
//!   classification head,
//! - `preprocess`: volume intensity normalization, affine augmentation, and
//!   atlas-based region statistics,
//! - `synth`: a deterministic phantom generator so every pipeline is
//!   exercisable without clinical data,
//! - `metrics` / `train`: cross-validation, training strategies, transfer
//!   evaluation,
//! - `io`: binary volume/atlas/checkpoint formats and CSV exports.

pub mod backbone;
pub mod encoder;
pub mod error;
pub mod io;
pub mod oracles;
pub mod metrics;
pub mod params;
pub mod preprocess;
pub mod synth;
pub mod train;
pub mod tensor;

pub use error::{Error, Result};
