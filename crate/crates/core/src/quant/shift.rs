use super::sulq::{eta_of, sulq_exponent};
use super::{Codes, QuantParams, Scheme};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Fractional bits of the fixed-point power-of-two accumulator.
const FRAC_BITS: i64 = 30;
const INV_ONE: f64 = 1.0 / (1u64 << FRAC_BITS) as f64;

/// `2^exponent` as an unsigned Q2.30 value, built with a single shift.
fn pow2_fixed(exponent: i64) -> Result<u32> {
    if !(-FRAC_BITS..=0).contains(&exponent) {
        return Err(Error::Range(format!(
            "exponent {exponent} outside [-{FRAC_BITS}, 0]"
        )));
    }
    Ok((1u32 << FRAC_BITS) >> (-exponent) as u32)
}

/// Dequantize log2-family codes through integer shifts.
///
/// Each code becomes a power of two in a 32-bit fixed-point register via a
/// right shift; converting the register to float and applying the scale (LQ)
/// or subtracting eta (SULQ) reproduces the float dequantizer bit for bit.
pub fn shift_infer_dequant(q: &Codes, p: &QuantParams) -> Result<Tensor> {
    q.check_range(p)?;
    let data = match p.scheme {
        Scheme::Log2 => {
            let s = p.scale[0];
            q.data
                .iter()
                .map(|&code| Ok((s * (pow2_fixed(-code)? as f64 * INV_ONE)) as f32))
                .collect::<Result<Vec<_>>>()?
        }
        Scheme::Sulq => {
            let eta = eta_of(p)?;
            q.data
                .iter()
                .map(|&code| {
                    let fixed = pow2_fixed(sulq_exponent(code, p))?;
                    Ok((fixed as f64 * INV_ONE - eta) as f32)
                })
                .collect::<Result<Vec<_>>>()?
        }
        Scheme::Uniform => {
            return Err(Error::Param("shift inference needs a log2-family quantizer".into()))
        }
    };
    Tensor::new(q.shape.clone(), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quant::{lq_dequant, sulq_dequant};

    fn all_codes(bits: u32) -> Codes {
        let n = 1i64 << bits;
        Codes { shape: vec![n as usize], data: (0..n).collect() }
    }

    #[test]
    fn log2_matches_float_path_on_every_code() {
        for s in [1.0, 0.868, 0.123_456_7] {
            let p = QuantParams::log2(3, s);
            let a = shift_infer_dequant(&all_codes(3), &p).unwrap();
            let b = lq_dequant(&all_codes(3), &p).unwrap();
            assert!(a.bitwise_eq(&b));
        }
    }

    #[test]
    fn sulq_matches_float_path_on_every_code() {
        for (s, z, eta) in [(2.0, 0, 1.18e-6), (0.45, 0, 0.05), (1.3, -1, 0.01)] {
            for bits in [2, 3, 4] {
                let p = QuantParams::sulq(bits, s, z, eta);
                let codes = all_codes(bits);
                let a = shift_infer_dequant(&codes, &p).unwrap();
                let b = sulq_dequant(&codes, &p).unwrap();
                assert!(a.bitwise_eq(&b), "s={s} z={z} bits={bits}");
            }
        }
    }

    #[test]
    fn zero_eta_is_a_power_of_two_table() {
        let p = QuantParams::sulq(3, 1.0, 0, 0.0);
        let v = shift_infer_dequant(&all_codes(3), &p).unwrap();
        let want: Vec<f32> = (0..8).map(|k| 2f32.powi(-k)).collect();
        assert_eq!(v.data(), want.as_slice());
    }

    #[test]
    fn powers_of_two_are_exact_down_to_minus_thirty() {
        for k in 0..=30 {
            let v = pow2_fixed(-k).unwrap() as f64 * INV_ONE;
            assert_eq!(v, 2f64.powi(-(k as i32)));
        }
        assert!(matches!(pow2_fixed(-31), Err(Error::Range(_))));
        assert!(matches!(pow2_fixed(1), Err(Error::Range(_))));
    }

    #[test]
    fn eight_bit_log2_overflows_budget() {
        let p = QuantParams::log2(8, 1.0);
        let q = Codes { shape: vec![1], data: vec![200] };
        assert!(matches!(shift_infer_dequant(&q, &p), Err(Error::Range(_))));
    }
}
