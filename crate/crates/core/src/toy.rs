//! A small synthetic ViT and labeled token-classification task.
//!
//! Each class has a prototype token matrix; samples are prototypes plus
//! Gaussian noise. A freshly initialized model is trained with Adam and
//! cross-entropy, then given heavy-tailed per-channel LayerNorm ranges by a
//! function-preserving rescale of each LayerNorm and the layer it feeds.
//! That mimics the inter-channel variation of post-LayerNorm activations in
//! pretrained vision transformers.

use log::info;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::error::Result;
use crate::model::{block_forward, head_forward, Head, Model, ModelConfig, NoHooks, Pool, ViTBlock};
use crate::optim::{cosine_lr, Adam};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyConfig {
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
    pub tokens: usize,
    pub mlp_ratio: f64,
    pub classes: usize,
    pub train_samples: usize,
    pub calib_samples: usize,
    pub eval_samples: usize,
    /// Standard deviation of the per-element sample noise.
    pub noise: f32,
    pub train_steps: usize,
    pub train_batch: usize,
    pub train_lr: f64,
    /// Log-normal sigma of the injected per-channel LayerNorm scales.
    pub channel_spread: f64,
    /// Multiplier on the initial query/key projection scale; larger values
    /// give peakier, longer-tailed attention.
    pub qk_gain: f32,
    pub seed: u64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            depth: 2,
            dim: 64,
            heads: 4,
            tokens: 16,
            mlp_ratio: 4.0,
            classes: 10,
            train_samples: 1024,
            calib_samples: 256,
            eval_samples: 512,
            noise: 2.0,
            train_steps: 150,
            train_batch: 32,
            train_lr: 2e-3,
            channel_spread: 0.5,
            qk_gain: 2.0,
            seed: 0,
        }
    }
}

/// Tokens `[S, N, D]` with class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub tokens: Tensor,
    pub labels: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct ToyBundle {
    pub model: Model,
    pub train: Dataset,
    pub calib: Dataset,
    pub eval: Dataset,
    /// Full-precision accuracy on the evaluation split.
    pub fp_accuracy: f64,
}

struct Task {
    prototypes: Vec<Tensor>,
    noise: f32,
}

impl Task {
    fn sample(&self, n: usize, rng: &mut ChaCha8Rng) -> Dataset {
        let classes = self.prototypes.len();
        let shape = self.prototypes[0].shape().to_vec();
        let per = self.prototypes[0].len();
        let normal = Normal::new(0.0f32, self.noise).expect("valid std");
        let mut data = Vec::with_capacity(n * per);
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let c = rng.gen_range(0..classes);
            labels.push(c);
            data.extend(self.prototypes[c].data().iter().map(|&p| p + normal.sample(rng)));
        }
        let mut full = vec![n];
        full.extend(shape);
        Dataset {
            tokens: Tensor::new(full, data).expect("consistent shape"),
            labels,
        }
    }
}

fn init_model(cfg: &ModelConfig, classes: usize, qk_gain: f32, rng: &mut ChaCha8Rng) -> Model {
    let d = cfg.dim;
    let mut blocks = Vec::with_capacity(cfg.depth);
    for _ in 0..cfg.depth {
        let mut b = ViTBlock::zeros(cfg);
        let hidden = cfg.hidden();
        b.qkv_w = Tensor::randn(&[d, 3 * d], (1.0 / d as f32).sqrt(), rng);
        for row in b.qkv_w.data_mut().chunks_mut(3 * d) {
            for v in &mut row[..2 * d] {
                *v *= qk_gain;
            }
        }
        b.proj_w = Tensor::randn(&[d, d], (0.5 / d as f32).sqrt(), rng);
        b.fc1_w = Tensor::randn(&[d, hidden], (1.0 / d as f32).sqrt(), rng);
        b.fc2_w = Tensor::randn(&[hidden, d], (0.5 / hidden as f32).sqrt(), rng);
        b.qkv_b = Tensor::randn(&[3 * d], 0.02, rng);
        b.fc1_b = Tensor::randn(&[hidden], 0.02, rng);
        blocks.push(b);
    }
    let head = Head {
        norm_gamma: Tensor::ones(&[d]),
        norm_beta: Tensor::zeros(&[d]),
        weight: Tensor::randn(&[d, classes], (1.0 / d as f32).sqrt(), rng),
        bias: Tensor::zeros(&[classes]),
    };
    Model::new(cfg.clone(), blocks, Some(head))
}

fn train(model: &mut Model, data: &Dataset, cfg: &ToyConfig, rng: &mut ChaCha8Rng) -> Result<()> {
    let head = model.head.as_mut().expect("toy model has a head");
    let mut sizes: Vec<usize> = model
        .blocks
        .iter()
        .flat_map(|b| b.params().map(|t| t.len()))
        .collect();
    sizes.extend([head.norm_gamma.len(), head.norm_beta.len(), head.weight.len(), head.bias.len()]);
    let mut opt = Adam::new(&sizes, 0.0);
    let s = data.labels.len();
    let mut order: Vec<usize> = (0..s).collect();
    let mut cursor = s;
    for step in 0..cfg.train_steps {
        if cursor + cfg.train_batch > s {
            order.shuffle(rng);
            cursor = 0;
        }
        let idx = &order[cursor..cursor + cfg.train_batch];
        cursor += cfg.train_batch;
        let x = data.tokens.select_rows(idx)?;
        let y: Vec<usize> = idx.iter().map(|&i| data.labels[i]).collect();

        let mut tape = Tape::new();
        let mut cur = tape.constant(x);
        let mut vars = Vec::new();
        for (l, blk) in model.blocks.iter().enumerate() {
            let v = blk.on_tape(&mut tape, true);
            cur = block_forward(&mut tape, cur, &v, model.config.heads, l, &mut NoHooks)?;
            vars.extend(v.all());
        }
        let head = model.head.as_ref().expect("toy model has a head");
        let hv = [
            tape.leaf(head.norm_gamma.clone(), true),
            tape.leaf(head.norm_beta.clone(), true),
            tape.leaf(head.weight.clone(), true),
            tape.leaf(head.bias.clone(), true),
        ];
        vars.extend(hv);
        let logits = head_forward(&mut tape, cur, hv[0], hv[1], hv[2], hv[3], model.config.pool)?;
        let loss = tape.cross_entropy(logits, &y)?;
        if step % 25 == 0 {
            info!("toy training step {step}: loss {:.4}", tape.value(loss).item());
        }
        tape.backward(loss)?;
        let grads: Vec<Vec<f32>> = vars
            .iter()
            .zip(&sizes)
            .map(|(&v, &n)| tape.grad(v).map_or_else(|| vec![0.0; n], <[f32]>::to_vec))
            .collect();
        let grads: Vec<&[f32]> = grads.iter().map(Vec::as_slice).collect();
        let head = model.head.as_mut().expect("toy model has a head");
        let mut params: Vec<&mut Tensor> = model
            .blocks
            .iter_mut()
            .flat_map(|b| b.params_mut())
            .collect();
        params.extend([&mut head.norm_gamma, &mut head.norm_beta, &mut head.weight, &mut head.bias]);
        opt.step(&mut params, &grads, cosine_lr(cfg.train_lr, step, cfg.train_steps));
    }
    Ok(())
}

/// Rescale each post-LayerNorm channel by a log-normal factor and shift it,
/// compensating in the following linear layer so the full-precision
/// function is unchanged up to rounding.
fn inject_channel_spread(model: &mut Model, sigma: f64, rng: &mut ChaCha8Rng) {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    for blk in &mut model.blocks {
        for (gamma, beta, w, b) in [
            (&mut blk.ln1_gamma, &mut blk.ln1_beta, &mut blk.qkv_w, &mut blk.qkv_b),
            (&mut blk.ln2_gamma, &mut blk.ln2_beta, &mut blk.fc1_w, &mut blk.fc1_b),
        ] {
            let out = w.shape()[1];
            for c in 0..gamma.len() {
                let k: f64 = (sigma * normal.sample(rng)).exp();
                let shift: f64 = sigma * normal.sample(rng);
                let old_beta = beta.data()[c] as f64;
                gamma.data_mut()[c] = (gamma.data()[c] as f64 * k) as f32;
                let new_beta = old_beta * k + shift;
                beta.data_mut()[c] = new_beta as f32;
                // x_new = k x_old + shift, so W_new[c] = W[c] / k and the bias
                // absorbs -shift / k * W[c]
                for j in 0..out {
                    let wv = w.data()[c * out + j] as f64;
                    b.data_mut()[j] = (b.data()[j] as f64 - shift / k * wv) as f32;
                    w.data_mut()[c * out + j] = (wv / k) as f32;
                }
            }
        }
    }
}

pub fn accuracy_fp(model: &Model, data: &Dataset, batch: usize) -> Result<f64> {
    let mut correct = 0;
    let s = data.labels.len();
    let mut start = 0;
    while start < s {
        let n = batch.min(s - start);
        let x = data.tokens.narrow(0, start, n)?;
        let out = model.forward_blocks(&x, 0..model.config.depth, &mut NoHooks)?;
        let logits = model.head_logits(&out)?;
        for (r, row) in logits.data().chunks(logits.last_dim()).enumerate() {
            correct += (crate::sos::argmax(row) == data.labels[start + r]) as usize;
        }
        start += n;
    }
    Ok(correct as f64 / s as f64)
}

/// Generate the task, train the model and split the data.
pub fn build(cfg: &ToyConfig) -> Result<ToyBundle> {
    let mc = ModelConfig {
        depth: cfg.depth,
        dim: cfg.dim,
        heads: cfg.heads,
        mlp_ratio: cfg.mlp_ratio,
        tokens: cfg.tokens,
        num_classes: Some(cfg.classes),
        pool: Pool::Mean,
    };
    mc.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let task = Task {
        prototypes: (0..cfg.classes)
            .map(|_| Tensor::randn(&[cfg.tokens, cfg.dim], 1.0, &mut rng))
            .collect(),
        noise: cfg.noise,
    };
    let train_set = task.sample(cfg.train_samples, &mut rng);
    let calib = task.sample(cfg.calib_samples, &mut rng);
    let eval = task.sample(cfg.eval_samples, &mut rng);
    let mut model = init_model(&mc, cfg.classes, cfg.qk_gain, &mut rng);
    train(&mut model, &train_set, cfg, &mut rng)?;
    inject_channel_spread(&mut model, cfg.channel_spread, &mut rng);
    let fp_accuracy = accuracy_fp(&model, &eval, 128)?;
    info!("toy model full-precision accuracy {fp_accuracy:.4}");
    model.metadata.insert("toy.seed".into(), cfg.seed.to_string());
    Ok(ToyBundle {
        model,
        train: train_set,
        calib,
        eval,
        fp_accuracy,
    })
}
