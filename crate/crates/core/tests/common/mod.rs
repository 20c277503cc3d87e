#![allow(dead_code)]

pub mod gradcheck;
pub mod oracle;
pub mod reparam_case;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use vitq_core::model::{Model, ModelConfig, Pool, ViTBlock};
use vitq_core::Tensor;

pub fn config(depth: usize, dim: usize, heads: usize, tokens: usize) -> ModelConfig {
    ModelConfig {
        depth,
        dim,
        heads,
        mlp_ratio: 4.0,
        tokens,
        num_classes: None,
        pool: Pool::Cls,
    }
}

pub fn random_block(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> ViTBlock {
    let mut b = ViTBlock::zeros(cfg);
    let d = cfg.dim as f32;
    let h = cfg.hidden() as f32;
    b.ln1_gamma = Tensor::uniform(&[cfg.dim], 0.5, 1.5, rng);
    b.ln1_beta = Tensor::randn(&[cfg.dim], 0.1, rng);
    b.qkv_w = Tensor::randn(&[cfg.dim, 3 * cfg.dim], d.sqrt().recip(), rng);
    b.qkv_b = Tensor::randn(&[3 * cfg.dim], 0.05, rng);
    b.proj_w = Tensor::randn(&[cfg.dim, cfg.dim], d.sqrt().recip(), rng);
    b.proj_b = Tensor::randn(&[cfg.dim], 0.05, rng);
    b.ln2_gamma = Tensor::uniform(&[cfg.dim], 0.5, 1.5, rng);
    b.ln2_beta = Tensor::randn(&[cfg.dim], 0.1, rng);
    b.fc1_w = Tensor::randn(&[cfg.dim, cfg.hidden()], d.sqrt().recip(), rng);
    b.fc1_b = Tensor::randn(&[cfg.hidden()], 0.05, rng);
    b.fc2_w = Tensor::randn(&[cfg.hidden(), cfg.dim], h.sqrt().recip(), rng);
    b.fc2_b = Tensor::randn(&[cfg.dim], 0.05, rng);
    b
}

/// ViT-style initialization: linear weights with std 0.02, zero biases,
/// identity LayerNorms.
pub fn vit_init_block(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> ViTBlock {
    let mut b = ViTBlock::zeros(cfg);
    b.qkv_w = Tensor::randn(&[cfg.dim, 3 * cfg.dim], 0.02, rng);
    b.proj_w = Tensor::randn(&[cfg.dim, cfg.dim], 0.02, rng);
    b.fc1_w = Tensor::randn(&[cfg.dim, cfg.hidden()], 0.02, rng);
    b.fc2_w = Tensor::randn(&[cfg.hidden(), cfg.dim], 0.02, rng);
    b
}

pub fn random_model(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Model {
    let blocks = (0..cfg.depth).map(|_| random_block(cfg, rng)).collect();
    Model::new(cfg.clone(), blocks, None)
}

pub fn f64s(t: &Tensor) -> Vec<f64> {
    t.data().iter().map(|&v| v as f64).collect()
}

/// `a[m×k] · b[k×n]`, triple loop.
pub fn ref_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for p in 0..k {
                out[i * n + j] += a[i * k + p] * b[p * n + j];
            }
        }
    }
    out
}

pub fn ref_linear(x: &[f64], w: &Tensor, b: &Tensor, rows: usize) -> Vec<f64> {
    let (k, n) = (w.shape()[0], w.shape()[1]);
    let mut out = ref_matmul(x, &f64s(w), rows, k, n);
    for r in 0..rows {
        for j in 0..n {
            out[r * n + j] += b.data()[j] as f64;
        }
    }
    out
}

pub fn ref_layernorm(x: &[f64], gamma: &[f64], beta: &[f64], eps: f64) -> Vec<f64> {
    let d = gamma.len();
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(d) {
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
        for c in 0..d {
            out.push((row[c] - mean) / (var + eps).sqrt() * gamma[c] + beta[c]);
        }
    }
    out
}

pub fn ref_softmax(row: &[f64]) -> Vec<f64> {
    let e: Vec<f64> = row.iter().map(|v| v.exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

pub fn ref_gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + statrs::function::erf::erf(x / std::f64::consts::SQRT_2))
}

/// One transformer block on `[N, D]` tokens, straight-line in `f64`.
pub fn ref_block(x: &[f64], blk: &ViTBlock, heads: usize) -> Vec<f64> {
    let d = blk.ln1_gamma.len();
    let n = x.len() / d;
    let dh = d / heads;
    let h = ref_layernorm(x, &f64s(&blk.ln1_gamma), &f64s(&blk.ln1_beta), 1e-6);
    let qkv = ref_linear(&h, &blk.qkv_w, &blk.qkv_b, n);
    let mut ctx = vec![0.0; n * d];
    for head in 0..heads {
        let at = |t: usize, part: usize, c: usize| qkv[t * 3 * d + part * d + head * dh + c];
        for i in 0..n {
            let scores: Vec<f64> = (0..n)
                .map(|j| (0..dh).map(|c| at(i, 0, c) * at(j, 1, c)).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let p = ref_softmax(&scores);
            for c in 0..dh {
                ctx[i * d + head * dh + c] = (0..n).map(|j| p[j] * at(j, 2, c)).sum();
            }
        }
    }
    let attn = ref_linear(&ctx, &blk.proj_w, &blk.proj_b, n);
    let z: Vec<f64> = attn.iter().zip(x).map(|(a, b)| a + b).collect();
    let h = ref_layernorm(&z, &f64s(&blk.ln2_gamma), &f64s(&blk.ln2_beta), 1e-6);
    let h: Vec<f64> = ref_linear(&h, &blk.fc1_w, &blk.fc1_b, n).into_iter().map(ref_gelu).collect();
    let m = ref_linear(&h, &blk.fc2_w, &blk.fc2_b, n);
    m.iter().zip(&z).map(|(a, b)| a + b).collect()
}

/// `‖a − b‖ / ‖b‖`.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
    let norm: f64 = b.iter().map(|y| y * y).sum();
    (diff / norm.max(1e-300)).sqrt()
}

pub fn random_tokens(samples: usize, tokens: usize, dim: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let mut t = Tensor::randn(&[samples, tokens, dim], 1.0, rng);
    for v in t.data_mut() {
        *v += rng.gen_range(-0.5..0.5);
    }
    t
}
