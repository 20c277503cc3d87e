//! Lossless channel-wise to layer-wise transition for post-LayerNorm
//! activation quantizers.
//!
//! A channel-wise quantizer `(s_c, z_c)` on the LayerNorm output is folded
//! into the LayerNorm affine parameters and the following linear layer so a
//! single layer-wise quantizer `(s̃, round(z̃))` yields the same codes:
//!
//! ```text
//! β̃ = (β + s⊙r2) / r1     γ̃ = γ / r1
//! W̃[i, :] = r1[i] · W[i, :]   b̃ = b − (s⊙r2) · W
//! ```
//!
//! with `r1 = s / s̃` and `r2 = z − round(z̃)`. Keeping `r2` integral makes
//! the code equality exact rather than approximate.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{HookSite, ViTBlock};
use crate::quant::{round_half_away, Granularity, QuantParams, Scheme};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReparamPlan {
    pub r1: Vec<f64>,
    pub r2: Vec<f64>,
    /// Original channel scales.
    pub scale: Vec<f64>,
    pub s_tilde: f64,
    /// Arithmetic mean of the channel zero points, before rounding.
    pub z_tilde: f64,
    pub bits: u32,
}

pub fn build_plan(p: &QuantParams) -> Result<ReparamPlan> {
    if p.granularity != Granularity::Channel || p.scheme != Scheme::Uniform {
        return Err(Error::Param("reparameterization needs a channel-wise uniform quantizer".into()));
    }
    if let Some(bad) = p.scale.iter().find(|s| !(s.is_finite() && **s > 0.0)) {
        return Err(Error::Param(format!("scale {bad} is not positive")));
    }
    if p.scale.len() != p.zero_point.len() {
        return Err(Error::Param("scale/zero-point length mismatch".into()));
    }
    let c = p.scale.len() as f64;
    let s_tilde = p.scale.iter().sum::<f64>() / c;
    let z_tilde = p.zero_point.iter().map(|&z| z as f64).sum::<f64>() / c;
    let z_layer = round_half_away(z_tilde);
    Ok(ReparamPlan {
        r1: p.scale.iter().map(|s| s / s_tilde).collect(),
        r2: p.zero_point.iter().map(|&z| z as f64 - z_layer).collect(),
        scale: p.scale.clone(),
        s_tilde,
        z_tilde,
        bits: p.bits,
    })
}

impl ReparamPlan {
    pub fn channels(&self) -> usize {
        self.r1.len()
    }

    /// The layer-wise quantizer that replaces the channel-wise one.
    pub fn layer_params(&self) -> QuantParams {
        QuantParams::uniform_layer(self.bits, self.s_tilde, round_half_away(self.z_tilde) as i64)
    }

    /// `s ⊙ r2`
    fn shift(&self) -> Vec<f64> {
        self.scale.iter().zip(&self.r2).map(|(s, r)| s * r).collect()
    }

    fn check(&self, gamma: &Tensor, beta: &Tensor, w: &Tensor, b: &Tensor) -> Result<(usize, usize)> {
        let c = self.channels();
        if gamma.shape() != [c] || beta.shape() != [c] || w.rank() != 2 || w.shape()[0] != c {
            return Err(Error::Contract(format!(
                "plan for {c} channels does not fit gamma {:?}, beta {:?}, weight {:?}",
                gamma.shape(),
                beta.shape(),
                w.shape()
            )));
        }
        let out = w.shape()[1];
        if b.shape() != [out] {
            return Err(Error::Contract(format!(
                "bias {:?} does not match weight {:?}",
                b.shape(),
                w.shape()
            )));
        }
        Ok((c, out))
    }
}

/// Rewrite a LayerNorm and the `[in, out]` linear layer it feeds.
pub fn apply_plan(
    plan: &ReparamPlan,
    gamma: &mut Tensor,
    beta: &mut Tensor,
    w: &mut Tensor,
    b: &mut Tensor,
) -> Result<()> {
    let (c, out) = plan.check(gamma, beta, w, b)?;
    let shift = plan.shift();
    let mut bias: Vec<f64> = b.data().iter().map(|&v| v as f64).collect();
    for i in 0..c {
        for (j, acc) in bias.iter_mut().enumerate() {
            *acc -= shift[i] * w.data()[i * out + j] as f64;
        }
    }
    for (j, v) in b.data_mut().iter_mut().enumerate() {
        *v = bias[j] as f32;
    }
    for i in 0..c {
        let r1 = plan.r1[i];
        let g = &mut gamma.data_mut()[i];
        *g = (*g as f64 / r1) as f32;
        let be = &mut beta.data_mut()[i];
        *be = ((*be as f64 + shift[i]) / r1) as f32;
        for v in &mut w.data_mut()[i * out..(i + 1) * out] {
            *v = (*v as f64 * r1) as f32;
        }
    }
    Ok(())
}

/// Undo [`apply_plan`].
pub fn revert_plan(
    plan: &ReparamPlan,
    gamma: &mut Tensor,
    beta: &mut Tensor,
    w: &mut Tensor,
    b: &mut Tensor,
) -> Result<()> {
    let (c, out) = plan.check(gamma, beta, w, b)?;
    let shift = plan.shift();
    for i in 0..c {
        let r1 = plan.r1[i];
        let g = &mut gamma.data_mut()[i];
        *g = (*g as f64 * r1) as f32;
        let be = &mut beta.data_mut()[i];
        *be = (*be as f64 * r1 - shift[i]) as f32;
        for v in &mut w.data_mut()[i * out..(i + 1) * out] {
            *v = (*v as f64 / r1) as f32;
        }
    }
    let mut bias: Vec<f64> = b.data().iter().map(|&v| v as f64).collect();
    for i in 0..c {
        for (j, acc) in bias.iter_mut().enumerate() {
            *acc += shift[i] * w.data()[i * out + j] as f64;
        }
    }
    for (j, v) in b.data_mut().iter_mut().enumerate() {
        *v = bias[j] as f32;
    }
    Ok(())
}

/// Apply a plan at one of a block's post-LayerNorm sites.
pub fn apply_to_block(plan: &ReparamPlan, blk: &mut ViTBlock, site: HookSite) -> Result<()> {
    match site {
        HookSite::QkvInput => apply_plan(plan, &mut blk.ln1_gamma, &mut blk.ln1_beta, &mut blk.qkv_w, &mut blk.qkv_b),
        HookSite::Fc1Input => apply_plan(plan, &mut blk.ln2_gamma, &mut blk.ln2_beta, &mut blk.fc1_w, &mut blk.fc1_b),
        _ => Err(Error::Contract(format!("`{site}` does not follow a LayerNorm"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn channel(scale: Vec<f64>, zero_point: Vec<i64>) -> QuantParams {
        QuantParams {
            bits: 4,
            scheme: Scheme::Uniform,
            granularity: Granularity::Channel,
            scale,
            zero_point,
            eta: None,
        }
    }

    #[test]
    fn homogeneous_channels_give_identity_plan() {
        let plan = build_plan(&channel(vec![0.3; 4], vec![5; 4])).unwrap();
        assert_eq!(plan.r1, [1.0; 4]);
        assert_eq!(plan.r2, [0.0; 4]);
    }

    #[test]
    fn mean_scale_and_ratios() {
        let plan = build_plan(&channel(vec![1.0, 3.0], vec![0, 0])).unwrap();
        assert_eq!(plan.s_tilde, 2.0);
        assert_eq!(plan.r1, [0.5, 1.5]);
    }

    #[test]
    fn identity_plan_is_bitwise_noop() {
        let plan = build_plan(&channel(vec![0.7; 3], vec![2; 3])).unwrap();
        let mut g = Tensor::from_vec(vec![1.1, -0.2, 0.3]);
        let mut be = Tensor::from_vec(vec![0.5, 0.6, -0.7]);
        let mut w = Tensor::new(vec![3, 2], vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap();
        let mut b = Tensor::from_vec(vec![0.01, -0.02]);
        let before = (g.clone(), be.clone(), w.clone(), b.clone());
        apply_plan(&plan, &mut g, &mut be, &mut w, &mut b).unwrap();
        assert!(g.bitwise_eq(&before.0) && be.bitwise_eq(&before.1));
        assert!(w.bitwise_eq(&before.2) && b.bitwise_eq(&before.3));
    }

    #[test]
    fn rejects_layer_wise_and_bad_shapes() {
        assert!(matches!(
            build_plan(&QuantParams::uniform_layer(4, 1.0, 0)),
            Err(Error::Param(_))
        ));
        let plan = build_plan(&channel(vec![1.0, 2.0], vec![0, 1])).unwrap();
        let mut g = Tensor::ones(&[3]);
        let mut be = Tensor::zeros(&[3]);
        let mut w = Tensor::zeros(&[3, 2]);
        let mut b = Tensor::zeros(&[2]);
        assert!(matches!(
            apply_plan(&plan, &mut g, &mut be, &mut w, &mut b),
            Err(Error::Contract(_))
        ));
    }
}
