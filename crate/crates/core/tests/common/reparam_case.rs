use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vitq_core::autograd::Tape;
use vitq_core::calibration::calibrate_uniform;
use vitq_core::model::LN_EPS;
use vitq_core::quant::{uq_quant, Granularity};
use vitq_core::reparam::{apply_plan, build_plan, revert_plan};
use vitq_core::Tensor;

use super::{f64s, rel_err};

struct Instance {
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    w: Tensor,
    b: Tensor,
}

/// A LayerNorm followed by a linear layer with random widths, log-normal
/// gains and shifted biases.
fn instance(seed: u64) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = rng.gen_range(8..48);
    let out = rng.gen_range(4..40);
    let mut gamma = Tensor::randn(&[d], 1.0, &mut rng);
    for g in gamma.data_mut() {
        *g = g.exp();
    }
    Instance {
        x: Tensor::randn(&[64, d], rng.gen_range(0.5..3.0), &mut rng),
        gamma,
        beta: Tensor::randn(&[d], 1.0, &mut rng),
        w: Tensor::randn(&[d, out], (1.0 / d as f32).sqrt(), &mut rng),
        b: Tensor::randn(&[out], 0.1, &mut rng),
    }
}

fn layernorm(x: &Tensor, g: &Tensor, b: &Tensor) -> Tensor {
    let mut tape = Tape::new();
    let (vx, vg, vb) = (tape.constant(x.clone()), tape.constant(g.clone()), tape.constant(b.clone()));
    let y = tape.layernorm(vx, vg, vb, LN_EPS).unwrap();
    tape.value(y).clone()
}

fn linear(h: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
    let mut tape = Tape::new();
    let (vh, vw, vb) = (tape.constant(h.clone()), tape.constant(w.clone()), tape.constant(b.clone()));
    let y = tape.matmul(vh, vw).unwrap();
    let y = tape.add(y, vb).unwrap();
    tape.value(y).clone()
}

#[derive(Debug, Default)]
pub struct ReparamCheck {
    /// Worst norm-wise relative error of the rewritten forward pass.
    pub forward_err: f64,
    pub mismatches: usize,
    pub codes: usize,
    /// Worst relative error of any parameter after reverting.
    pub revert_err: f64,
    /// Worst relative error of `s = r1 · s̃`.
    pub factor_err: f64,
    pub non_integer_r2: usize,
}

impl ReparamCheck {
    fn merge(&mut self, o: ReparamCheck) {
        self.forward_err = self.forward_err.max(o.forward_err);
        self.mismatches += o.mismatches;
        self.codes += o.codes;
        self.revert_err = self.revert_err.max(o.revert_err);
        self.factor_err = self.factor_err.max(o.factor_err);
        self.non_integer_r2 += o.non_integer_r2;
    }
}

/// Rewrite one instance at 3, 4 and 6 bits.
pub fn check_instance(seed: u64) -> ReparamCheck {
    let inst = instance(seed);
    let h = layernorm(&inst.x, &inst.gamma, &inst.beta);
    let before = linear(&h, &inst.w, &inst.b);
    let mut out = ReparamCheck::default();
    for bits in [3, 4, 6] {
        let channel = calibrate_uniform(&h, bits, Granularity::Channel).unwrap();
        let plan = build_plan(&channel).unwrap();
        let (mut g, mut be, mut w, mut b) = (inst.gamma.clone(), inst.beta.clone(), inst.w.clone(), inst.b.clone());
        apply_plan(&plan, &mut g, &mut be, &mut w, &mut b).unwrap();

        let mut r = ReparamCheck::default();
        for (&r1, &s) in plan.r1.iter().zip(&plan.scale) {
            r.factor_err = r.factor_err.max((r1 * plan.s_tilde - s).abs() / s);
        }
        r.non_integer_r2 = plan.r2.iter().filter(|v| v.fract() != 0.0).count();

        let h2 = layernorm(&inst.x, &g, &be);
        r.forward_err = rel_err(&f64s(&linear(&h2, &w, &b)), &f64s(&before));

        let want = uq_quant(&h, &channel).unwrap();
        let got = uq_quant(&h2, &plan.layer_params()).unwrap();
        r.mismatches = want.data.iter().zip(&got.data).filter(|(a, b)| a != b).count();
        r.codes = want.len();

        revert_plan(&plan, &mut g, &mut be, &mut w, &mut b).unwrap();
        for (x, y) in [(&g, &inst.gamma), (&be, &inst.beta), (&w, &inst.w), (&b, &inst.b)] {
            for (&p, &q) in x.data().iter().zip(y.data()) {
                r.revert_err = r.revert_err.max((p - q).abs() as f64 / (1.0 + q.abs() as f64));
            }
        }
        out.merge(r);
    }
    out
}

pub fn check_instances(n: u64) -> ReparamCheck {
    let mut all = ReparamCheck::default();
    for seed in 0..n {
        all.merge(check_instance(seed));
    }
    all
}
