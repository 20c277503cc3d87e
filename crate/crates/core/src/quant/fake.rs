use super::log2::lq_codes;
use super::sulq::sulq_codes;
use super::uniform::uq_codes;
use super::{lq_dequant, sulq_dequant, uq_dequant, Codes, QuantParams, Scheme};
use crate::autograd::{Tape, Var};
use crate::error::Result;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct FakeQuantResult {
    pub dequantized: Tensor,
    pub integer_codes: Codes,
    /// Elements whose code was in range before clamping.
    pub in_range: Vec<bool>,
}

/// `dequant(quant(x))` for any scheme, with the clamp mask.
pub fn fake_quant_tensor(x: &Tensor, p: &QuantParams) -> Result<FakeQuantResult> {
    let (codes, in_range) = match p.scheme {
        Scheme::Uniform => uq_codes(x, p)?,
        Scheme::Log2 => lq_codes(x, p)?,
        Scheme::Sulq => sulq_codes(x, p)?,
    };
    let dequantized = match p.scheme {
        Scheme::Uniform => uq_dequant(&codes, p)?,
        Scheme::Log2 => lq_dequant(&codes, p)?,
        Scheme::Sulq => sulq_dequant(&codes, p)?,
    };
    Ok(FakeQuantResult {
        dequantized,
        integer_codes: codes,
        in_range,
    })
}

/// Fake-quantize `x` on the tape with a clipped straight-through estimator:
/// the gradient passes unchanged where the unclamped code was in range and
/// is zero where it saturated.
pub fn fake_quant(tape: &mut Tape, x: Var, p: &QuantParams) -> Result<Var> {
    let r = fake_quant_tensor(tape.value(x), p)?;
    tape.gate(x, r.dequantized, r.in_range)
}
