//! Transformer block stack with fake-quant hooks on every matmul operand.
//!
//! Weights are held as `[in, out]` so a linear layer is `x · W + b`. On disk
//! (see [`crate::checkpoint`]) linear weights use the `[out, in]` layout of
//! common model zoos and are transposed on load and save.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::checkpoint::Container;
use crate::error::{Error, Result};
use crate::quant::{fake_quant, QuantParams};
use crate::tensor::Tensor;

pub const LN_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pool {
    /// First token.
    Cls,
    /// Mean over tokens.
    Mean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
    pub tokens: usize,
    #[serde(default)]
    pub num_classes: Option<usize>,
    #[serde(default = "default_pool")]
    pub pool: Pool,
}

fn default_pool() -> Pool {
    Pool::Cls
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn hidden(&self) -> usize {
        (self.dim as f64 * self.mlp_ratio).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.dim == 0 || self.heads == 0 || self.tokens == 0 {
            return Err(Error::Config(format!("degenerate model config {self:?}")));
        }
        if self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "dim {} not divisible by heads {}",
                self.dim, self.heads
            )));
        }
        if self.hidden() == 0 {
            return Err(Error::Config("mlp hidden size is zero".into()));
        }
        Ok(())
    }
}

/// The quantizer attachment points of one block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum HookSite {
    QkvInput,
    QkvWeight,
    Query,
    Key,
    Softmax,
    Value,
    ProjInput,
    ProjWeight,
    Fc1Input,
    Fc1Weight,
    Fc2Input,
    Fc2Weight,
}

impl HookSite {
    pub const ALL: [HookSite; 12] = [
        HookSite::QkvInput,
        HookSite::QkvWeight,
        HookSite::Query,
        HookSite::Key,
        HookSite::Softmax,
        HookSite::Value,
        HookSite::ProjInput,
        HookSite::ProjWeight,
        HookSite::Fc1Input,
        HookSite::Fc1Weight,
        HookSite::Fc2Input,
        HookSite::Fc2Weight,
    ];

    pub fn suffix(self) -> &'static str {
        match self {
            HookSite::QkvInput => "attn.qkv.input",
            HookSite::QkvWeight => "attn.qkv.weight",
            HookSite::Query => "attn.q",
            HookSite::Key => "attn.k",
            HookSite::Softmax => "attn.softmax",
            HookSite::Value => "attn.v",
            HookSite::ProjInput => "attn.proj.input",
            HookSite::ProjWeight => "attn.proj.weight",
            HookSite::Fc1Input => "mlp.fc1.input",
            HookSite::Fc1Weight => "mlp.fc1.weight",
            HookSite::Fc2Input => "mlp.fc2.input",
            HookSite::Fc2Weight => "mlp.fc2.weight",
        }
    }

    pub fn name(self, block: usize) -> String {
        format!("blocks.{block}.{}", self.suffix())
    }

    pub fn is_weight(self) -> bool {
        matches!(
            self,
            HookSite::QkvWeight | HookSite::ProjWeight | HookSite::Fc1Weight | HookSite::Fc2Weight
        )
    }

    /// LayerNorm outputs feeding the QKV projection and FC1.
    pub fn is_post_layernorm(self) -> bool {
        matches!(self, HookSite::QkvInput | HookSite::Fc1Input)
    }

    pub fn parse(name: &str) -> Option<(usize, HookSite)> {
        let rest = name.strip_prefix("blocks.")?;
        let (idx, suffix) = rest.split_once('.')?;
        let block = idx.parse().ok()?;
        HookSite::ALL
            .into_iter()
            .find(|s| s.suffix() == suffix)
            .map(|s| (block, s))
    }
}

impl fmt::Display for HookSite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.suffix())
    }
}

/// Hook-point name → quantizer; `None` keeps that operand full precision.
pub type QuantMap = BTreeMap<String, Option<QuantParams>>;

/// Interception of every matmul operand during a forward pass.
pub trait Hooks {
    fn apply(&mut self, tape: &mut Tape, block: usize, site: HookSite, x: Var) -> Result<Var>;
}

/// Full-precision forward.
pub struct NoHooks;

impl Hooks for NoHooks {
    fn apply(&mut self, _: &mut Tape, _: usize, _: HookSite, x: Var) -> Result<Var> {
        Ok(x)
    }
}

/// Fake-quantize operands according to a [`QuantMap`]. Every hook point the
/// forward pass touches must have an entry.
pub struct QuantHooks<'a> {
    pub map: &'a QuantMap,
}

impl Hooks for QuantHooks<'_> {
    fn apply(&mut self, tape: &mut Tape, block: usize, site: HookSite, x: Var) -> Result<Var> {
        let name = site.name(block);
        match self.map.get(&name) {
            None => Err(Error::Config(format!("hook map has no entry for `{name}`"))),
            Some(None) => Ok(x),
            Some(Some(p)) => fake_quant(tape, x, p),
        }
    }
}

/// Weights of one transformer block, `[in, out]` layout.
#[derive(Clone, Debug, PartialEq)]
pub struct ViTBlock {
    pub ln1_gamma: Tensor,
    pub ln1_beta: Tensor,
    pub qkv_w: Tensor,
    pub qkv_b: Tensor,
    pub proj_w: Tensor,
    pub proj_b: Tensor,
    pub ln2_gamma: Tensor,
    pub ln2_beta: Tensor,
    pub fc1_w: Tensor,
    pub fc1_b: Tensor,
    pub fc2_w: Tensor,
    pub fc2_b: Tensor,
}

/// Canonical checkpoint names, in [`ViTBlock::params`] order, and whether the
/// tensor is a linear weight stored transposed.
pub const BLOCK_TENSORS: [(&str, bool); 12] = [
    ("norm1.weight", false),
    ("norm1.bias", false),
    ("attn.qkv.weight", true),
    ("attn.qkv.bias", false),
    ("attn.proj.weight", true),
    ("attn.proj.bias", false),
    ("norm2.weight", false),
    ("norm2.bias", false),
    ("mlp.fc1.weight", true),
    ("mlp.fc1.bias", false),
    ("mlp.fc2.weight", true),
    ("mlp.fc2.bias", false),
];

impl ViTBlock {
    /// Block with every matrix and bias zero and identity LayerNorms.
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let (d, h) = (cfg.dim, cfg.hidden());
        Self {
            ln1_gamma: Tensor::ones(&[d]),
            ln1_beta: Tensor::zeros(&[d]),
            qkv_w: Tensor::zeros(&[d, 3 * d]),
            qkv_b: Tensor::zeros(&[3 * d]),
            proj_w: Tensor::zeros(&[d, d]),
            proj_b: Tensor::zeros(&[d]),
            ln2_gamma: Tensor::ones(&[d]),
            ln2_beta: Tensor::zeros(&[d]),
            fc1_w: Tensor::zeros(&[d, h]),
            fc1_b: Tensor::zeros(&[h]),
            fc2_w: Tensor::zeros(&[h, d]),
            fc2_b: Tensor::zeros(&[d]),
        }
    }

    pub fn params(&self) -> [&Tensor; 12] {
        [
            &self.ln1_gamma,
            &self.ln1_beta,
            &self.qkv_w,
            &self.qkv_b,
            &self.proj_w,
            &self.proj_b,
            &self.ln2_gamma,
            &self.ln2_beta,
            &self.fc1_w,
            &self.fc1_b,
            &self.fc2_w,
            &self.fc2_b,
        ]
    }

    pub fn params_mut(&mut self) -> [&mut Tensor; 12] {
        [
            &mut self.ln1_gamma,
            &mut self.ln1_beta,
            &mut self.qkv_w,
            &mut self.qkv_b,
            &mut self.proj_w,
            &mut self.proj_b,
            &mut self.ln2_gamma,
            &mut self.ln2_beta,
            &mut self.fc1_w,
            &mut self.fc1_b,
            &mut self.fc2_w,
            &mut self.fc2_b,
        ]
    }

    /// Expected shapes in [`ViTBlock::params`] order.
    pub fn expected_shapes(cfg: &ModelConfig) -> [Vec<usize>; 12] {
        let (d, h) = (cfg.dim, cfg.hidden());
        [
            vec![d],
            vec![d],
            vec![d, 3 * d],
            vec![3 * d],
            vec![d, d],
            vec![d],
            vec![d],
            vec![d],
            vec![d, h],
            vec![h],
            vec![h, d],
            vec![d],
        ]
    }

    pub fn weight(&self, site: HookSite) -> Option<&Tensor> {
        match site {
            HookSite::QkvWeight => Some(&self.qkv_w),
            HookSite::ProjWeight => Some(&self.proj_w),
            HookSite::Fc1Weight => Some(&self.fc1_w),
            HookSite::Fc2Weight => Some(&self.fc2_w),
            _ => None,
        }
    }

    pub fn weight_mut(&mut self, site: HookSite) -> Option<&mut Tensor> {
        match site {
            HookSite::QkvWeight => Some(&mut self.qkv_w),
            HookSite::ProjWeight => Some(&mut self.proj_w),
            HookSite::Fc1Weight => Some(&mut self.fc1_w),
            HookSite::Fc2Weight => Some(&mut self.fc2_w),
            _ => None,
        }
    }

    pub fn on_tape(&self, tape: &mut Tape, trainable: bool) -> BlockVars {
        let p = self.params().map(|t| tape.leaf(t.clone(), trainable));
        BlockVars {
            ln1_gamma: p[0],
            ln1_beta: p[1],
            qkv_w: p[2],
            qkv_b: p[3],
            proj_w: p[4],
            proj_b: p[5],
            ln2_gamma: p[6],
            ln2_beta: p[7],
            fc1_w: p[8],
            fc1_b: p[9],
            fc2_w: p[10],
            fc2_b: p[11],
        }
    }

    pub fn bitwise_eq(&self, other: &ViTBlock) -> bool {
        self.params()
            .iter()
            .zip(other.params())
            .all(|(a, b)| a.bitwise_eq(b))
    }
}

/// Tape handles of a block's parameters.
#[derive(Clone, Copy, Debug)]
pub struct BlockVars {
    pub ln1_gamma: Var,
    pub ln1_beta: Var,
    pub qkv_w: Var,
    pub qkv_b: Var,
    pub proj_w: Var,
    pub proj_b: Var,
    pub ln2_gamma: Var,
    pub ln2_beta: Var,
    pub fc1_w: Var,
    pub fc1_b: Var,
    pub fc2_w: Var,
    pub fc2_b: Var,
}

impl BlockVars {
    pub fn all(&self) -> [Var; 12] {
        [
            self.ln1_gamma,
            self.ln1_beta,
            self.qkv_w,
            self.qkv_b,
            self.proj_w,
            self.proj_b,
            self.ln2_gamma,
            self.ln2_beta,
            self.fc1_w,
            self.fc1_b,
            self.fc2_w,
            self.fc2_b,
        ]
    }
}

/// Multi-head self-attention on an already-normalized `[B, N, D]` input.
/// The post-Softmax probabilities pass through the [`HookSite::Softmax`]
/// hook before multiplying `V`.
pub fn mhsa(
    tape: &mut Tape,
    x: Var,
    vars: &BlockVars,
    heads: usize,
    block: usize,
    hooks: &mut dyn Hooks,
) -> Result<Var> {
    let shape = tape.value(x).shape().to_vec();
    let (b, n, d) = (shape[0], shape[1], shape[2]);
    if d % heads != 0 {
        return Err(Error::Config(format!("dim {d} not divisible by {heads} heads")));
    }
    let dh = d / heads;
    let x = hooks.apply(tape, block, HookSite::QkvInput, x)?;
    let w = hooks.apply(tape, block, HookSite::QkvWeight, vars.qkv_w)?;
    let qkv = tape.matmul(x, w)?;
    let qkv = tape.add(qkv, vars.qkv_b)?;
    let qkv = tape.reshape(qkv, &[b, n, 3, heads, dh])?;
    let qkv = tape.permute(qkv, &[2, 0, 3, 1, 4])?;
    let split = |i: usize, tape: &mut Tape| -> Result<Var> {
        let t = tape.narrow(qkv, 0, i, 1)?;
        tape.reshape(t, &[b, heads, n, dh])
    };
    let q = split(0, tape)?;
    let k = split(1, tape)?;
    let v = split(2, tape)?;
    let q = hooks.apply(tape, block, HookSite::Query, q)?;
    let k = hooks.apply(tape, block, HookSite::Key, k)?;
    let kt = tape.transpose_last(k)?;
    let scores = tape.matmul(q, kt)?;
    let scores = tape.scale(scores, (1.0 / (dh as f64).sqrt()) as f32);
    let probs = tape.softmax(scores, 3)?;
    let probs = hooks.apply(tape, block, HookSite::Softmax, probs)?;
    let v = hooks.apply(tape, block, HookSite::Value, v)?;
    let ctx = tape.matmul(probs, v)?;
    let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
    let ctx = tape.reshape(ctx, &[b, n, d])?;
    let ctx = hooks.apply(tape, block, HookSite::ProjInput, ctx)?;
    let w = hooks.apply(tape, block, HookSite::ProjWeight, vars.proj_w)?;
    let out = tape.matmul(ctx, w)?;
    tape.add(out, vars.proj_b)
}

/// `Z = MHSA(LN(X)) + X; X' = MLP(LN(Z)) + Z` on `[B, N, D]` or `[N, D]`.
pub fn block_forward(
    tape: &mut Tape,
    x: Var,
    vars: &BlockVars,
    heads: usize,
    block: usize,
    hooks: &mut dyn Hooks,
) -> Result<Var> {
    let shape = tape.value(x).shape().to_vec();
    let d = tape.value(vars.ln1_gamma).len();
    let x = match shape.len() {
        2 => tape.reshape(x, &[1, shape[0], shape[1]])?,
        3 => x,
        _ => {
            return Err(Error::Dimension {
                op: "block_forward",
                lhs: shape,
                rhs: vec![d],
            })
        }
    };
    if tape.value(x).last_dim() != d {
        return Err(Error::Dimension {
            op: "block_forward",
            lhs: shape,
            rhs: vec![d],
        });
    }
    let h = tape.layernorm(x, vars.ln1_gamma, vars.ln1_beta, LN_EPS)?;
    let attn = mhsa(tape, h, vars, heads, block, hooks)?;
    let z = tape.add(attn, x)?;

    let h = tape.layernorm(z, vars.ln2_gamma, vars.ln2_beta, LN_EPS)?;
    let h = hooks.apply(tape, block, HookSite::Fc1Input, h)?;
    let w1 = hooks.apply(tape, block, HookSite::Fc1Weight, vars.fc1_w)?;
    let h = tape.matmul(h, w1)?;
    let h = tape.add(h, vars.fc1_b)?;
    let h = tape.gelu(h);
    let h = hooks.apply(tape, block, HookSite::Fc2Input, h)?;
    let w2 = hooks.apply(tape, block, HookSite::Fc2Weight, vars.fc2_w)?;
    let h = tape.matmul(h, w2)?;
    let h = tape.add(h, vars.fc2_b)?;
    let out = tape.add(h, z)?;
    if shape.len() == 2 {
        tape.reshape(out, &shape)
    } else {
        Ok(out)
    }
}

/// Run one block on a tensor without keeping the tape.
pub fn block_apply(
    x: &Tensor,
    blk: &ViTBlock,
    heads: usize,
    block: usize,
    hooks: &mut dyn Hooks,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let vars = blk.on_tape(&mut tape, false);
    let xv = tape.constant(x.clone());
    let out = block_forward(&mut tape, xv, &vars, heads, block, hooks)?;
    Ok(tape.value(out).clone())
}

/// Final LayerNorm and linear classifier, executed in full precision.
#[derive(Clone, Debug, PartialEq)]
pub struct Head {
    pub norm_gamma: Tensor,
    pub norm_beta: Tensor,
    /// `[D, classes]`
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Head {
    pub fn classes(&self) -> usize {
        self.bias.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub blocks: Vec<ViTBlock>,
    pub head: Option<Head>,
    /// Tensors carried through unchanged (patch embedding, positional
    /// embedding, recorded reference activations, ...).
    pub extras: BTreeMap<String, Tensor>,
    pub metadata: BTreeMap<String, String>,
}

const HEAD_TENSORS: [&str; 4] = ["norm.weight", "norm.bias", "head.weight", "head.bias"];

impl Model {
    pub fn new(config: ModelConfig, blocks: Vec<ViTBlock>, head: Option<Head>) -> Self {
        Self {
            config,
            blocks,
            head,
            extras: BTreeMap::new(),
            metadata: BTreeMap::new(),
        }
    }

    /// Run blocks `range` on `[B, N, D]` tokens.
    pub fn forward_blocks(
        &self,
        x: &Tensor,
        range: std::ops::Range<usize>,
        hooks: &mut dyn Hooks,
    ) -> Result<Tensor> {
        let mut cur = x.clone();
        for l in range {
            cur = block_apply(&cur, &self.blocks[l], self.config.heads, l, hooks)?;
        }
        Ok(cur)
    }

    /// Classifier logits `[B, classes]` from final-block tokens.
    pub fn head_logits(&self, tokens: &Tensor) -> Result<Tensor> {
        let head = self
            .head
            .as_ref()
            .ok_or_else(|| Error::Config("model has no classifier head".into()))?;
        let mut tape = Tape::new();
        let x = tape.constant(tokens.clone());
        let g = tape.constant(head.norm_gamma.clone());
        let b = tape.constant(head.norm_beta.clone());
        let w = tape.constant(head.weight.clone());
        let bias = tape.constant(head.bias.clone());
        let out = head_forward(&mut tape, x, g, b, w, bias, self.config.pool)?;
        Ok(tape.value(out).clone())
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new();
        for (l, blk) in self.blocks.iter().enumerate() {
            for ((name, transposed), t) in BLOCK_TENSORS.iter().zip(blk.params()) {
                let t = if *transposed {
                    t.transpose_last().expect("rank-2 weight")
                } else {
                    t.clone()
                };
                c.insert(format!("blocks.{l}.{name}"), t);
            }
        }
        if let Some(h) = &self.head {
            c.insert(HEAD_TENSORS[0], h.norm_gamma.clone());
            c.insert(HEAD_TENSORS[1], h.norm_beta.clone());
            c.insert(HEAD_TENSORS[2], h.weight.transpose_last().expect("rank-2 weight"));
            c.insert(HEAD_TENSORS[3], h.bias.clone());
        }
        for (k, v) in &self.extras {
            c.insert(k.clone(), v.clone());
        }
        c.metadata = self.metadata.clone();
        let cfg = &self.config;
        let m = &mut c.metadata;
        m.insert("model.depth".into(), cfg.depth.to_string());
        m.insert("model.dim".into(), cfg.dim.to_string());
        m.insert("model.heads".into(), cfg.heads.to_string());
        m.insert("model.mlp_ratio".into(), cfg.mlp_ratio.to_string());
        m.insert("model.tokens".into(), cfg.tokens.to_string());
        m.insert(
            "model.pool".into(),
            match cfg.pool {
                Pool::Cls => "cls".into(),
                Pool::Mean => "mean".into(),
            },
        );
        if let Some(c) = cfg.num_classes {
            m.insert("model.num_classes".into(), c.to_string());
        } else {
            m.remove("model.num_classes");
        }
        c
    }

    pub fn from_container(mut c: Container) -> Result<Self> {
        let config = config_from_metadata(&c.metadata)?;
        let mut blocks = Vec::with_capacity(config.depth);
        let shapes = ViTBlock::expected_shapes(&config);
        for l in 0..config.depth {
            let mut blk = ViTBlock::zeros(&config);
            for (((name, transposed), slot), want) in
                BLOCK_TENSORS.iter().zip(blk.params_mut()).zip(&shapes)
            {
                let full = format!("blocks.{l}.{name}");
                let mut t = c.take(&full)?;
                if *transposed && t.rank() == 2 {
                    t = t.transpose_last()?;
                }
                if t.shape() != want.as_slice() {
                    return Err(Error::ShapeMismatch {
                        name: full,
                        expected: want.clone(),
                        found: t.shape().to_vec(),
                    });
                }
                *slot = t;
            }
            blocks.push(blk);
        }
        if c.tensors.keys().any(|k| k.starts_with(&format!("blocks.{}.", config.depth))) {
            return Err(Error::Header(format!(
                "checkpoint has more than {} blocks",
                config.depth
            )));
        }
        let head = if HEAD_TENSORS.iter().all(|n| c.tensors.contains_key(*n)) {
            let norm_gamma = c.take(HEAD_TENSORS[0])?;
            let norm_beta = c.take(HEAD_TENSORS[1])?;
            let mut weight = c.take(HEAD_TENSORS[2])?;
            if weight.rank() == 2 {
                weight = weight.transpose_last()?;
            }
            let bias = c.take(HEAD_TENSORS[3])?;
            let d = config.dim;
            let classes = bias.len();
            let check = |name: &str, t: &Tensor, want: Vec<usize>| -> Result<()> {
                if t.shape() != want.as_slice() {
                    return Err(Error::ShapeMismatch {
                        name: name.into(),
                        expected: want,
                        found: t.shape().to_vec(),
                    });
                }
                Ok(())
            };
            check(HEAD_TENSORS[0], &norm_gamma, vec![d])?;
            check(HEAD_TENSORS[1], &norm_beta, vec![d])?;
            check(HEAD_TENSORS[2], &weight, vec![d, classes])?;
            if let Some(nc) = config.num_classes {
                check(HEAD_TENSORS[3], &bias, vec![nc])?;
            }
            Some(Head {
                norm_gamma,
                norm_beta,
                weight,
                bias,
            })
        } else {
            None
        };
        let mut metadata = c.metadata;
        metadata.retain(|k, _| !k.starts_with("model."));
        Ok(Self {
            config,
            blocks,
            head,
            extras: c.tensors,
            metadata,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(Container::load(path)?)
    }
}

/// Load a checkpoint's configuration and transformer blocks.
pub fn load_checkpoint(path: &Path) -> Result<(ModelConfig, Vec<ViTBlock>)> {
    let m = Model::load(path)?;
    Ok((m.config, m.blocks))
}

pub(crate) fn head_forward(
    tape: &mut Tape,
    x: Var,
    gamma: Var,
    beta: Var,
    w: Var,
    bias: Var,
    pool: Pool,
) -> Result<Var> {
    let h = tape.layernorm(x, gamma, beta, LN_EPS)?;
    let shape = tape.value(h).shape().to_vec();
    let pooled = match pool {
        Pool::Mean => tape.mean_axis(h, 1)?,
        Pool::Cls => {
            let t = tape.narrow(h, 1, 0, 1)?;
            tape.reshape(t, &[shape[0], shape[2]])?
        }
    };
    let logits = tape.matmul(pooled, w)?;
    tape.add(logits, bias)
}

fn config_from_metadata(m: &BTreeMap<String, String>) -> Result<ModelConfig> {
    fn field<T: std::str::FromStr>(m: &BTreeMap<String, String>, key: &str) -> Result<T> {
        let raw = m
            .get(key)
            .ok_or_else(|| Error::Header(format!("metadata is missing `{key}`")))?;
        raw.parse()
            .map_err(|_| Error::Header(format!("metadata `{key}` = `{raw}` does not parse")))
    }
    let pool = match m.get("model.pool").map(String::as_str) {
        None | Some("cls") => Pool::Cls,
        Some("mean") => Pool::Mean,
        Some(other) => return Err(Error::Header(format!("unknown pool `{other}`"))),
    };
    let num_classes = match m.get("model.num_classes") {
        Some(_) => Some(field(m, "model.num_classes")?),
        None => None,
    };
    let cfg = ModelConfig {
        depth: field(m, "model.depth")?,
        dim: field(m, "model.dim")?,
        heads: field(m, "model.heads")?,
        mlp_ratio: field(m, "model.mlp_ratio")?,
        tokens: field(m, "model.tokens")?,
        num_classes,
        pool,
    };
    cfg.validate().map_err(|e| Error::Header(e.to_string()))?;
    Ok(cfg)
}

/// Every hook-point name of a model, in block then site order.
pub fn hook_points(depth: usize) -> Vec<(usize, HookSite)> {
    (0..depth)
        .flat_map(|l| HookSite::ALL.into_iter().map(move |s| (l, s)))
        .collect()
}
