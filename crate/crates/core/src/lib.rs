//! Post-training quantization of vision-transformer blocks.
//!
//! The crate is layered bottom-up:
//!
//! * [`tensor`] and [`autograd`]: a dense `f32` tensor and a reverse-mode tape.
//! * [`quant`]: uniform (UQ), log2 (LQ) and shift-uniform-log2 (SULQ)
//!   quantizers, their straight-through fake-quant and a fixed-point
//!   shift-based inference path.
//! * [`calibration`]: min/max and η-search calibration over hooked activations.
//! * [`model`] and [`checkpoint`]: the transformer block stack and its
//!   container file format.
//! * [`reparam`], [`teacher`], [`optim`] and [`sos`]: the three-stage block
//!   reconstruction pipeline.
//! * [`diagnostics`]: loss-landscape probes and quantizer comparison tables.
//! * [`toy`]: a small synthetic model and labeled task for end-to-end runs.

pub mod autograd;
pub mod calibration;
pub mod checkpoint;
pub mod diagnostics;
pub mod error;
pub mod model;
pub mod optim;
pub mod quant;
pub mod reparam;
pub mod sos;
pub mod teacher;
pub mod tensor;
pub mod toy;

pub use error::{Error, Result};
pub use tensor::Tensor;
