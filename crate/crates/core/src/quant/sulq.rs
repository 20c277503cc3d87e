use super::{clamp_code, round_half_away, Codes, QuantParams, Scheme};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `-log2(x + eta)` for every element.
pub fn sulq_transform(x: &[f32], eta: f64) -> Result<Vec<f64>> {
    x.iter()
        .map(|&v| {
            let shifted = v as f64 + eta;
            if shifted > 0.0 {
                Ok(-shifted.log2())
            } else {
                Err(Error::Domain(format!("x + eta = {shifted} is not positive")))
            }
        })
        .collect()
}

pub(crate) fn eta_of(p: &QuantParams) -> Result<f64> {
    p.eta
        .ok_or_else(|| Error::Param("sulq parameters are missing eta".into()))
}

pub(crate) fn sulq_codes(x: &Tensor, p: &QuantParams) -> Result<(Codes, Vec<bool>)> {
    p.check_for(x, Scheme::Sulq)?;
    let eta = eta_of(p)?;
    let (s, z) = (p.scale[0], p.zero_point[0] as f64);
    let max = p.max_code();
    let t = sulq_transform(x.data(), eta)?;
    let (data, mask) = t
        .into_iter()
        .map(|tv| clamp_code(round_half_away(tv / s) + z, max))
        .unzip();
    Ok((
        Codes {
            shape: x.shape().to_vec(),
            data,
        },
        mask,
    ))
}

/// Uniform quantization of `-log2(x + eta)`.
pub fn sulq_quant(x: &Tensor, p: &QuantParams) -> Result<Codes> {
    sulq_codes(x, p).map(|(c, _)| c)
}

/// Integer exponent `round(-D-UQ(q))` reached by code `q`.
pub fn sulq_exponent(q: i64, p: &QuantParams) -> i64 {
    round_half_away(-(p.scale[0] * (q - p.zero_point[0]) as f64)) as i64
}

/// `2^round(-s (q - z)) - eta`.
pub fn sulq_dequant(q: &Codes, p: &QuantParams) -> Result<Tensor> {
    if p.scheme != Scheme::Sulq {
        return Err(Error::Param(format!("expected Sulq parameters, got {:?}", p.scheme)));
    }
    let eta = eta_of(p)?;
    q.check_range(p)?;
    let data = q
        .data
        .iter()
        .map(|&code| (2f64.powi(sulq_exponent(code, p) as i32) - eta) as f32)
        .collect();
    Tensor::new(q.shape.clone(), data)
}
