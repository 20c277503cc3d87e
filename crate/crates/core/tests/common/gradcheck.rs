//! Reverse-mode gradients against central finite differences.
//!
//! Every check reduces the op output with fixed random weights in `f64`, so
//! the analytic gradient of the reduction is exactly those weights and the
//! finite difference sees only the op's own rounding.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vitq_core::autograd::{Tape, Var};
use vitq_core::calibration::{calibrate_log2, sulq_params_for_eta};
use vitq_core::quant::{fake_quant, QuantParams};
use vitq_core::{Result, Tensor};

pub const H: f64 = 1e-3;
pub const TOL: f64 = 1e-3;
pub const SEEDS: u64 = 20;

type Op = dyn Fn(&mut Tape, &[Var]) -> Result<Var>;
type Make = dyn Fn(&mut ChaCha8Rng) -> Vec<Tensor>;

pub struct Case {
    pub name: String,
    make: Box<Make>,
    op: Box<Op>,
}

fn case(
    name: impl Into<String>,
    make: impl Fn(&mut ChaCha8Rng) -> Vec<Tensor> + 'static,
    op: impl Fn(&mut Tape, &[Var]) -> Result<Var> + 'static,
) -> Case {
    Case {
        name: name.into(),
        make: Box::new(make),
        op: Box::new(op),
    }
}

fn weighted(out: &Tensor, w: &[f64]) -> f64 {
    out.data().iter().zip(w).map(|(&y, &w)| y as f64 * w).sum()
}

fn forward_value(inputs: &[Tensor], f: &Op, w: &[f64]) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&mut tape, &vars).unwrap();
    weighted(tape.value(out), w)
}

/// Norm-wise relative error of analytic vs numeric gradient, per input.
fn gradient_errors(inputs: &[Tensor], f: &Op, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = f(&mut tape, &vars).unwrap();
    let n_out = tape.value(out).len();
    let w: Vec<f64> = (0..n_out).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let wt = Tensor::new(
        tape.value(out).shape().to_vec(),
        w.iter().map(|&v| v as f32).collect(),
    )
    .unwrap();
    let wv = tape.constant(wt.clone());
    let prod = tape.mul(out, wv).unwrap();
    let loss = tape.sum(prod);
    tape.backward(loss).unwrap();
    let w: Vec<f64> = wt.data().iter().map(|&v| v as f64).collect();

    let mut errs = Vec::new();
    for (k, input) in inputs.iter().enumerate() {
        let analytic: Vec<f64> = match tape.grad(vars[k]) {
            Some(g) => g.iter().map(|&v| v as f64).collect(),
            None => vec![0.0; input.len()],
        };
        let mut numeric = vec![0.0; input.len()];
        for i in 0..input.len() {
            let mut probe = inputs.to_vec();
            let x0 = input.data()[i] as f64;
            probe[k].data_mut()[i] = (x0 + H) as f32;
            let up = forward_value(&probe, f, &w);
            probe[k].data_mut()[i] = (x0 - H) as f32;
            let down = forward_value(&probe, f, &w);
            let step = (x0 + H) as f32 as f64 - probe[k].data()[i] as f64;
            numeric[i] = (up - down) / step;
        }
        let diff: f64 = analytic.iter().zip(&numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
        let norm: f64 = numeric.iter().map(|n| n * n).sum::<f64>().sqrt();
        errs.push(diff / norm.max(1e-6));
    }
    errs
}

/// Largest error over every seed and input: `(error, seed, input index)`.
pub fn worst_error(c: &Case) -> (f64, u64, usize) {
    let mut worst = (0.0, 0, 0);
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = (c.make)(&mut rng);
        for (k, e) in gradient_errors(&inputs, &*c.op, &mut rng).into_iter().enumerate() {
            if e > worst.0 {
                worst = (e, seed, k);
            }
        }
    }
    worst
}

fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(shape, 1.0, rng)
}

pub fn primitive_cases() -> Vec<Case> {
    let mut cases = vec![
        case("matmul", |r| vec![randn(&[3, 5], r), randn(&[5, 4], r)], |t, v| t.matmul(v[0], v[1])),
        case(
            "matmul batched",
            |r| vec![randn(&[2, 3, 4], r), randn(&[4, 6], r)],
            |t, v| t.matmul(v[0], v[1]),
        ),
        case(
            "matmul 4d",
            |r| vec![randn(&[2, 2, 3, 4], r), randn(&[2, 2, 4, 3], r)],
            |t, v| t.matmul(v[0], v[1]),
        ),
        case("add", |r| vec![randn(&[2, 3, 4], r), randn(&[4], r)], |t, v| t.add(v[0], v[1])),
        case("sub", |r| vec![randn(&[3, 4], r), randn(&[3, 4], r)], |t, v| t.sub(v[0], v[1])),
        case("mul", |r| vec![randn(&[2, 3, 4], r), randn(&[4], r)], |t, v| t.mul(v[0], v[1])),
        case("scale", |r| vec![randn(&[3, 4], r)], |t, v| Ok(t.scale(v[0], -1.7))),
        case("permute", |r| vec![randn(&[2, 3, 4], r)], |t, v| t.permute(v[0], &[2, 0, 1])),
        case("transpose", |r| vec![randn(&[2, 3, 4], r)], |t, v| t.transpose_last(v[0])),
        case("reshape", |r| vec![randn(&[2, 6], r)], |t, v| t.reshape(v[0], &[3, 4])),
        case("narrow", |r| vec![randn(&[3, 8], r)], |t, v| t.narrow(v[0], 1, 2, 5)),
        case(
            "layernorm",
            |r| vec![randn(&[2, 3, 8], r), randn(&[8], r), randn(&[8], r)],
            |t, v| t.layernorm(v[0], v[1], v[2], 1e-6),
        ),
        case("gelu", |r| vec![Tensor::randn(&[4, 6], 2.0, r)], |t, v| Ok(t.gelu(v[0]))),
        case("sum", |r| vec![randn(&[3, 4], r)], |t, v| Ok(t.sum(v[0]))),
        case("mean", |r| vec![randn(&[2, 5, 3], r)], |t, v| t.mean_axis(v[0], 1)),
        case("l2", |r| vec![randn(&[3, 4], r)], |t, v| Ok(t.l2_norm(v[0]))),
        case(
            "cross entropy",
            |r| vec![Tensor::randn(&[2, 7], 2.0, r)],
            |t, v| t.cross_entropy(v[0], &[3, 6]),
        ),
    ];
    for axis in 0..3 {
        cases.push(case(
            format!("softmax axis {axis}"),
            |r| vec![randn(&[3, 4, 5], r)],
            move |t, v| t.softmax(v[0], axis),
        ));
    }
    cases
}

pub struct SurrogateCase {
    pub name: &'static str,
    params: QuantParams,
    make: Box<dyn Fn(&mut ChaCha8Rng) -> Vec<f32>>,
    in_range: Box<dyn Fn(f32) -> bool>,
}

/// The straight-through surrogate is the identity inside the representable
/// range and constant outside it. Inputs are kept away from rounding and
/// clamp boundaries so the surrogate is differentiable at every probe.
pub fn surrogate_cases() -> Vec<SurrogateCase> {
    // range [s(0 - z), s(7 - z)] = [-0.6, 0.8] with s = 0.2, z = 3
    let uniform = SurrogateCase {
        name: "uniform",
        params: QuantParams::uniform_layer(3, 0.2, 3),
        make: Box::new(|r| (0..32).map(|_| r.gen_range(-2.0f32..2.0)).collect()),
        in_range: Box::new(|v| (-0.7..=0.9).contains(&v)),
    };
    // unclamped codes are round(-log2 x); in range for x >= 2^-7.5
    let log2 = SurrogateCase {
        name: "log2",
        params: calibrate_log2(&[1.0], 3).unwrap(),
        make: Box::new(|r| (0..32).map(|_| 2f32.powf(r.gen_range(-10.0..0.0))).collect()),
        in_range: Box::new(|v| -(v as f64).log2() < 7.5),
    };
    let samples: Vec<f32> = (0..64).map(|i| 2f32.powi(-(i % 12))).collect();
    let p = sulq_params_for_eta(&samples, 3, 1e-3).unwrap();
    let (s, z, max) = (p.scale[0], p.zero_point[0] as f64, p.max_code() as f64);
    let sulq = SurrogateCase {
        name: "sulq",
        params: p,
        make: Box::new(|r| (0..32).map(|_| 2f32.powf(r.gen_range(-14.0..0.0))).collect()),
        in_range: Box::new(move |v| {
            let u = (-((v as f64) + 1e-3).log2() / s + z).round();
            (0.0..=max).contains(&u)
        }),
    };
    vec![uniform, log2, sulq]
}

/// Largest surrogate error over every seed: `(error, seed)`.
pub fn surrogate_worst_error(c: &SurrogateCase) -> (f64, u64) {
    let mut worst = (0.0, 0);
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let xs = (c.make)(&mut rng);
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(xs.clone()), true);
        let y = fake_quant(&mut tape, x, &c.params).unwrap();
        let w: Vec<f32> = (0..xs.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let wv = tape.constant(Tensor::from_vec(w.clone()));
        let prod = tape.mul(y, wv).unwrap();
        let loss = tape.sum(prod);
        tape.backward(loss).unwrap();
        let g = tape.grad(x).unwrap();
        let surrogate = |v: f64, clamp: bool| if clamp { 0.0 } else { v };
        let mut diff = 0.0;
        let mut norm = 0.0;
        for (i, &xi) in xs.iter().enumerate() {
            let clamp = !(c.in_range)(xi);
            let xi = xi as f64;
            let numeric = w[i] as f64 * (surrogate(xi + H, clamp) - surrogate(xi - H, clamp)) / (2.0 * H);
            diff += (g[i] as f64 - numeric).powi(2);
            norm += numeric * numeric;
        }
        let e = diff.sqrt() / norm.sqrt().max(1e-6);
        if e > worst.0 {
            worst = (e, seed);
        }
    }
    worst
}
