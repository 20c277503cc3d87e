//! Uniform, log2 and shift-uniform-log2 quantizers.
//!
//! All quantizer arithmetic runs in `f64` on `f32` inputs. Rounding is
//! half-away-from-zero everywhere ([`round_half_away`]).
//!
//! The channel axis is always the last tensor dimension: activations are
//! `[.., tokens, channels]` and weights are stored `[in, out]`, so both the
//! per-channel activation quantizer and the per-output-channel weight
//! quantizer index the trailing axis.

mod fake;
mod log2;
mod shift;
mod sulq;
mod uniform;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use fake::{fake_quant, fake_quant_tensor, FakeQuantResult};
pub use log2::{lq_codes_unclamped, lq_dequant, lq_quant};
pub use shift::shift_infer_dequant;
pub use sulq::{sulq_dequant, sulq_exponent, sulq_quant, sulq_transform};
pub use uniform::{uq_dequant, uq_quant};

/// Inner-scale floor for degenerate (constant) calibration ranges.
pub const MIN_SCALE: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    Uniform,
    Log2,
    Sulq,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Granularity {
    Layer,
    Channel,
}

/// State of one quantizer.
///
/// For [`Scheme::Sulq`], `scale`/`zero_point` belong to the inner uniform
/// quantizer acting on `-log2(x + eta)`. For [`Scheme::Log2`], `scale` is the
/// log2 reference `s` and `zero_point` is unused (kept at 0).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuantParams {
    pub bits: u32,
    pub scheme: Scheme,
    pub granularity: Granularity,
    pub scale: Vec<f64>,
    pub zero_point: Vec<i64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eta: Option<f64>,
}

impl QuantParams {
    pub fn uniform_layer(bits: u32, scale: f64, zero_point: i64) -> Self {
        Self {
            bits,
            scheme: Scheme::Uniform,
            granularity: Granularity::Layer,
            scale: vec![scale],
            zero_point: vec![zero_point],
            eta: None,
        }
    }

    pub fn log2(bits: u32, scale: f64) -> Self {
        Self {
            bits,
            scheme: Scheme::Log2,
            granularity: Granularity::Layer,
            scale: vec![scale],
            zero_point: vec![0],
            eta: None,
        }
    }

    pub fn sulq(bits: u32, inner_scale: f64, inner_zero: i64, eta: f64) -> Self {
        Self {
            bits,
            scheme: Scheme::Sulq,
            granularity: Granularity::Layer,
            scale: vec![inner_scale],
            zero_point: vec![inner_zero],
            eta: Some(eta),
        }
    }

    pub fn max_code(&self) -> i64 {
        (1i64 << self.bits) - 1
    }

    pub fn channels(&self) -> usize {
        self.scale.len()
    }

    /// Check every structural invariant.
    ///
    /// Zero points are not range-checked: min/max calibration on data
    /// that does not straddle zero legitimately produces zero points outside
    /// the code range.
    pub fn validate(&self) -> Result<()> {
        if !(2..=8).contains(&self.bits) {
            return Err(Error::Param(format!("bits {} outside [2, 8]", self.bits)));
        }
        if self.scale.is_empty() || self.scale.len() != self.zero_point.len() {
            return Err(Error::Param(format!(
                "{} scales vs {} zero points",
                self.scale.len(),
                self.zero_point.len()
            )));
        }
        if let Some(bad) = self.scale.iter().find(|s| !(s.is_finite() && **s > 0.0)) {
            return Err(Error::Param(format!("scale {bad} is not positive")));
        }
        if self.granularity == Granularity::Layer && self.scale.len() != 1 {
            return Err(Error::Param("layer granularity needs exactly one scale".into()));
        }
        match (self.scheme, self.eta) {
            (Scheme::Sulq, Some(e)) if e.is_finite() && e > 0.0 => {}
            (Scheme::Sulq, _) => return Err(Error::Param("sulq needs a positive eta".into())),
            (_, Some(_)) => return Err(Error::Param("eta is only valid for sulq".into())),
            _ => {}
        }
        if self.scheme != Scheme::Uniform && self.granularity == Granularity::Channel {
            return Err(Error::Param("log2-family quantizers are layer-wise".into()));
        }
        Ok(())
    }

    /// Checks shared by every op: positive scales and channel count matching
    /// the tensor's trailing axis.
    pub(crate) fn check_for(&self, x: &Tensor, scheme: Scheme) -> Result<()> {
        if self.scheme != scheme {
            return Err(Error::Param(format!(
                "expected {scheme:?} parameters, got {:?}",
                self.scheme
            )));
        }
        if self.scale.is_empty() || self.scale.len() != self.zero_point.len() {
            return Err(Error::Param("scale/zero-point length mismatch".into()));
        }
        if let Some(bad) = self.scale.iter().find(|s| !(**s > 0.0)) {
            return Err(Error::Param(format!("scale {bad} is not positive")));
        }
        if !(1..=16).contains(&self.bits) {
            return Err(Error::Param(format!("bits {} unsupported", self.bits)));
        }
        if self.granularity == Granularity::Channel && self.scale.len() != x.last_dim() {
            return Err(Error::Param(format!(
                "{} channel scales for a tensor with {} channels",
                self.scale.len(),
                x.last_dim()
            )));
        }
        Ok(())
    }

    /// Parameter index for flat element `i` of a tensor with `channels`
    /// trailing channels.
    #[inline]
    pub(crate) fn slot(&self, i: usize, channels: usize) -> usize {
        match self.granularity {
            Granularity::Layer => 0,
            Granularity::Channel => i % channels,
        }
    }
}

/// Integer codes with the shape of the tensor they quantize.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Codes {
    pub shape: Vec<usize>,
    pub data: Vec<i64>,
}

impl Codes {
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub(crate) fn check_range(&self, p: &QuantParams) -> Result<()> {
        let max = p.max_code();
        match self.data.iter().find(|&&q| q < 0 || q > max) {
            Some(q) => Err(Error::Contract(format!("code {q} outside [0, {max}]"))),
            None => Ok(()),
        }
    }
}

/// Round half away from zero.
#[inline]
pub fn round_half_away(v: f64) -> f64 {
    v.round()
}

/// `round(x)` clamped to the code range, plus whether it was in range
/// before clamping.
#[inline]
pub(crate) fn clamp_code(unclamped: f64, max: i64) -> (i64, bool) {
    if unclamped.is_nan() {
        return (max, false);
    }
    if unclamped < 0.0 {
        (0, false)
    } else if unclamped > max as f64 {
        (max, false)
    } else {
        (unclamped as i64, true)
    }
}
