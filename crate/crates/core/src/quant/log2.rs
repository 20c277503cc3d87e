use super::{clamp_code, round_half_away, Codes, QuantParams, Scheme};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `round(-log2(x / s))` before clamping; `+inf` for `x == 0`.
pub fn lq_codes_unclamped(x: &Tensor, p: &QuantParams) -> Result<Vec<f64>> {
    p.check_for(x, Scheme::Log2)?;
    let s = p.scale[0];
    x.data()
        .iter()
        .map(|&v| {
            if v < 0.0 || v.is_nan() {
                Err(Error::Domain(format!("log2 quantizer got negative input {v}")))
            } else if v == 0.0 {
                Ok(f64::INFINITY)
            } else {
                Ok(round_half_away(-(v as f64 / s).log2()))
            }
        })
        .collect()
}

pub(crate) fn lq_codes(x: &Tensor, p: &QuantParams) -> Result<(Codes, Vec<bool>)> {
    let max = p.max_code();
    let raw = lq_codes_unclamped(x, p)?;
    let (data, mask) = raw.into_iter().map(|u| clamp_code(u, max)).unzip();
    Ok((
        Codes {
            shape: x.shape().to_vec(),
            data,
        },
        mask,
    ))
}

/// `clamp(round(-log2(x / s)), 0, 2^b - 1)`. Zero maps to the top code.
pub fn lq_quant(x: &Tensor, p: &QuantParams) -> Result<Codes> {
    lq_codes(x, p).map(|(c, _)| c)
}

/// `s * 2^-q`.
pub fn lq_dequant(q: &Codes, p: &QuantParams) -> Result<Tensor> {
    if p.scheme != Scheme::Log2 {
        return Err(Error::Param(format!("expected Log2 parameters, got {:?}", p.scheme)));
    }
    q.check_range(p)?;
    let s = p.scale[0];
    let data = q
        .data
        .iter()
        .map(|&code| (s * 2f64.powi(-(code as i32))) as f32)
        .collect();
    Tensor::new(q.shape.clone(), data)
}
