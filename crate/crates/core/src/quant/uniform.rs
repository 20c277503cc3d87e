use super::{clamp_code, round_half_away, Codes, QuantParams, Scheme};
use crate::error::Result;
use crate::tensor::Tensor;

/// `clamp(round(x / s) + z, 0, 2^b - 1)` with the in-range mask.
pub(crate) fn uq_codes(x: &Tensor, p: &QuantParams) -> Result<(Codes, Vec<bool>)> {
    p.check_for(x, Scheme::Uniform)?;
    let max = p.max_code();
    let ch = x.last_dim();
    let mut data = Vec::with_capacity(x.len());
    let mut mask = Vec::with_capacity(x.len());
    for (i, &v) in x.data().iter().enumerate() {
        let c = p.slot(i, ch);
        let u = round_half_away(v as f64 / p.scale[c]) + p.zero_point[c] as f64;
        let (q, ok) = clamp_code(u, max);
        data.push(q);
        mask.push(ok);
    }
    Ok((
        Codes {
            shape: x.shape().to_vec(),
            data,
        },
        mask,
    ))
}

pub fn uq_quant(x: &Tensor, p: &QuantParams) -> Result<Codes> {
    uq_codes(x, p).map(|(c, _)| c)
}

/// `s * (q - z)`.
pub fn uq_dequant(q: &Codes, p: &QuantParams) -> Result<Tensor> {
    q.check_range(p)?;
    let ch = *q.shape.last().unwrap_or(&1);
    let data = q
        .data
        .iter()
        .enumerate()
        .map(|(i, &code)| {
            let c = p.slot(i, ch);
            (p.scale[c] * (code - p.zero_point[c]) as f64) as f32
        })
        .collect();
    Tensor::new(q.shape.clone(), data)
}
