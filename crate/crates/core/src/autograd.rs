//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! Every primitive appends a node holding its forward value and the data its
//! backward rule needs. [`Tape::backward`] walks the nodes in reverse and
//! accumulates into the gradient buffers of leaves created with
//! `requires_grad = true`. Intermediate gradients are transient, so calling
//! `backward` twice without [`Tape::zero_grad`] doubles every leaf gradient.

use crate::error::{Error, Result};
use crate::tensor::{broadcast_index, broadcast_shape, gemm, numel, reduce_to, transpose2, Tensor};

const SQRT_2: f64 = std::f64::consts::SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(MatMulPlan),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    Permute(Var, Vec<usize>),
    Reshape(Var),
    Narrow { src: Var, axis: usize, start: usize },
    Softmax { src: Var, axis: usize },
    LayerNorm(LayerNormSaved),
    Gelu(Var),
    Sum(Var),
    MeanAxis { src: Var, axis: usize },
    L2Norm(Var),
    Gate { src: Var, mask: Vec<bool> },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<f32> },
}

#[derive(Debug)]
struct MatMulPlan {
    a: Var,
    b: Var,
    m: usize,
    k: usize,
    n: usize,
    /// (a batch, b batch) feeding each output batch
    pairs: Vec<(usize, usize)>,
    a_batches: usize,
    b_batches: usize,
}

#[derive(Debug)]
struct LayerNormSaved {
    x: Var,
    gamma: Var,
    beta: Var,
    normalized: Vec<f32>,
    rstd: Vec<f64>,
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f32>>,
}

/// Recording of one forward computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf; `None` for tensors that never received
    /// one.
    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Batched matrix product over the last two axes. Leading axes broadcast.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape().to_vec(), self.value(b).shape().to_vec());
        let mismatch = || Error::Dimension {
            op: "matmul",
            lhs: sa.clone(),
            rhs: sb.clone(),
        };
        if sa.len() < 2 || sb.len() < 2 {
            return Err(mismatch());
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != k2 {
            return Err(mismatch());
        }
        let (ba, bb) = (&sa[..sa.len() - 2], &sb[..sb.len() - 2]);
        let batch = broadcast_shape(ba, bb).ok_or_else(mismatch)?;
        // a weight-style right operand folds a's batch axes into rows, so
        // the whole product (and its weight gradient) is one 2-D kernel call
        let folded = bb.is_empty();
        let (rows, pairs, a_batches, b_batches) = if folded {
            (numel(ba) * m, vec![(0, 0)], 1, 1)
        } else {
            let ia = broadcast_index(ba, &batch);
            let ib = broadcast_index(bb, &batch);
            (m, ia.into_iter().zip(ib).collect::<Vec<_>>(), numel(ba), numel(bb))
        };
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = vec![0f32; pairs.len() * rows * n];
        for (p, &(i, j)) in pairs.iter().enumerate() {
            gemm(
                &av[i * rows * k..(i + 1) * rows * k],
                &bv[j * k * n..(j + 1) * k * n],
                rows,
                k,
                n,
                &mut out[p * rows * n..(p + 1) * rows * n],
            );
        }
        let mut shape = batch;
        shape.push(m);
        shape.push(n);
        let value = Tensor::new(shape, out)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(
            value,
            Op::MatMul(MatMulPlan {
                a,
                b,
                m: rows,
                k,
                n,
                pairs,
                a_batches,
                b_batches,
            }),
            rg,
        ))
    }

    fn broadcast_binary(
        &mut self,
        a: Var,
        b: Var,
        op: &'static str,
        f: impl Fn(f32, f32) -> f32,
    ) -> Result<(Tensor, bool)> {
        let (ta, tb) = (self.value(a), self.value(b));
        let shape = broadcast_shape(ta.shape(), tb.shape()).ok_or_else(|| Error::Dimension {
            op,
            lhs: ta.shape().to_vec(),
            rhs: tb.shape().to_vec(),
        })?;
        let data: Vec<f32> = if ta.shape() == tb.shape() {
            ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let ia = broadcast_index(ta.shape(), &shape);
            let ib = broadcast_index(tb.shape(), &shape);
            ia.iter()
                .zip(&ib)
                .map(|(&i, &j)| f(ta.data()[i], tb.data()[j]))
                .collect()
        };
        Ok((Tensor::new(shape, data)?, self.rg(&[a, b])))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.broadcast_binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.broadcast_binary(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.broadcast_binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: f32) -> Var {
        let t = self.value(a).map(|v| v * c);
        let rg = self.rg(&[a]);
        self.push(t, Op::Scale(a, c), rg)
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let t = self.value(a).permute(axes)?;
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::Permute(a, axes.to_vec()), rg))
    }

    pub fn transpose_last(&mut self, a: Var) -> Result<Var> {
        let r = self.value(a).rank();
        if r < 2 {
            return Err(Error::Contract("transpose needs rank >= 2".into()));
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 2, r - 1);
        self.permute(a, &axes)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).reshape(shape)?;
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::Reshape(a), rg))
    }

    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let t = self.value(a).narrow(axis, start, len)?;
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::Narrow { src: a, axis, start }, rg))
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let x = self.value(a);
        if axis >= x.rank() {
            return Err(Error::Contract(format!(
                "softmax axis {axis} invalid for shape {:?}",
                x.shape()
            )));
        }
        let (outer, len, inner) = split_axis(x.shape(), axis);
        let src = x.data();
        let mut out = vec![0f32; src.len()];
        let mut buf = vec![0f64; len];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let mx = (0..len).map(|j| src[at(j)]).fold(f32::NEG_INFINITY, f32::max) as f64;
                let mut total = 0f64;
                for (j, b) in buf.iter_mut().enumerate() {
                    *b = (src[at(j)] as f64 - mx).exp();
                    total += *b;
                }
                for (j, b) in buf.iter().enumerate() {
                    out[at(j)] = (b / total) as f32;
                }
            }
        }
        let t = Tensor::new(x.shape().to_vec(), out)?;
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::Softmax { src: a, axis }, rg))
    }

    /// LayerNorm over the last axis with affine `gamma`, `beta`.
    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
        let d = tx.last_dim();
        if tg.len() != d || tb.len() != d {
            return Err(Error::Dimension {
                op: "layernorm",
                lhs: tx.shape().to_vec(),
                rhs: tg.shape().to_vec(),
            });
        }
        let rows = tx.len() / d;
        let mut normalized = vec![0f32; tx.len()];
        let mut out = vec![0f32; tx.len()];
        let mut rstd = vec![0f64; rows];
        for r in 0..rows {
            let row = &tx.data()[r * d..(r + 1) * d];
            let mean = row.iter().map(|&v| v as f64).sum::<f64>() / d as f64;
            let var = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            rstd[r] = inv;
            for c in 0..d {
                let n = (row[c] as f64 - mean) * inv;
                normalized[r * d + c] = n as f32;
                out[r * d + c] = (n * tg.data()[c] as f64 + tb.data()[c] as f64) as f32;
            }
        }
        let t = Tensor::new(tx.shape().to_vec(), out)?;
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            t,
            Op::LayerNorm(LayerNormSaved {
                x,
                gamma,
                beta,
                normalized,
                rstd,
            }),
            rg,
        ))
    }

    /// Exact-erf GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|v| gelu(v as f64) as f32);
        let rg = self.rg(&[a]);
        self.push(t, Op::Gelu(a), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum_f64();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s as f32), Op::Sum(a), rg)
    }

    /// Mean along `axis`; the axis is removed from the shape.
    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let x = self.value(a);
        if axis >= x.rank() || x.rank() < 2 {
            return Err(Error::Contract(format!(
                "mean axis {axis} invalid for shape {:?}",
                x.shape()
            )));
        }
        let (outer, len, inner) = split_axis(x.shape(), axis);
        let mut out = vec![0f32; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let s: f64 = (0..len).map(|j| x.data()[(o * len + j) * inner + i] as f64).sum();
                out[o * inner + i] = (s / len as f64) as f32;
            }
        }
        let mut shape = x.shape().to_vec();
        shape.remove(axis);
        let t = Tensor::new(shape, out)?;
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::MeanAxis { src: a, axis }, rg))
    }

    /// Euclidean norm of the whole tensor, as a scalar.
    pub fn l2_norm(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).data().iter().map(|&v| (v as f64).powi(2)).sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s.sqrt() as f32), Op::L2Norm(a), rg)
    }

    /// Emit `value` in place of `src` while passing gradients through where
    /// `mask` is set and blocking them elsewhere. Straight-through estimators
    /// are built on this.
    pub fn gate(&mut self, src: Var, value: Tensor, mask: Vec<bool>) -> Result<Var> {
        let s = self.value(src);
        if s.shape() != value.shape() || mask.len() != value.len() {
            return Err(Error::Dimension {
                op: "gate",
                lhs: s.shape().to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        let rg = self.rg(&[src]);
        Ok(self.push(value, Op::Gate { src, mask }, rg))
    }

    /// Mean negative log-likelihood of integer `targets` under row-wise
    /// softmax of `logits[B×C]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let l = self.value(logits);
        if l.rank() != 2 || l.shape()[0] != targets.len() {
            return Err(Error::Data(format!(
                "logits {:?} vs {} targets",
                l.shape(),
                targets.len()
            )));
        }
        let c = l.shape()[1];
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::Data(format!("target {bad} out of range for {c} classes")));
        }
        let mut probs = vec![0f32; l.len()];
        let mut nll = 0f64;
        for (r, &t) in targets.iter().enumerate() {
            let row = &l.data()[r * c..(r + 1) * c];
            let mx = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
            let z: f64 = row.iter().map(|&v| (v as f64 - mx).exp()).sum();
            for j in 0..c {
                probs[r * c + j] = ((row[j] as f64 - mx).exp() / z) as f32;
            }
            nll += z.ln() + mx - row[t] as f64;
        }
        let value = Tensor::scalar((nll / targets.len() as f64) as f32);
        let rg = self.rg(&[logits]);
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Back-propagate from a scalar `loss`, accumulating into every
    /// `requires_grad` leaf.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f32>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[idx].op {
                let node = &mut self.nodes[idx];
                match &mut node.grad {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    None => node.grad = Some(g),
                }
                continue;
            }
            for (v, contrib) in self.local_grads(idx, &g)? {
                if !self.nodes[v.0].requires_grad {
                    continue;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(contrib),
                }
            }
        }
        Ok(())
    }

    fn local_grads(&self, idx: usize, g: &[f32]) -> Result<Vec<(Var, Vec<f32>)>> {
        let node = &self.nodes[idx];
        let out_shape = node.value.shape();
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        let shape_of = |v: Var| self.nodes[v.0].value.shape();
        let mut res = Vec::with_capacity(2);
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(p) => {
                let av = self.nodes[p.a.0].value.data();
                let bv = self.nodes[p.b.0].value.data();
                let (m, k, n) = (p.m, p.k, p.n);
                if rg(p.a) {
                    let mut acc = vec![0f64; p.a_batches * m * k];
                    let mut tmp = vec![0f32; m * k];
                    for (pi, &(i, j)) in p.pairs.iter().enumerate() {
                        let bt = transpose2(&bv[j * k * n..(j + 1) * k * n], k, n);
                        gemm(&g[pi * m * n..(pi + 1) * m * n], &bt, m, n, k, &mut tmp);
                        for (a, &t) in acc[i * m * k..(i + 1) * m * k].iter_mut().zip(&tmp) {
                            *a += t as f64;
                        }
                    }
                    res.push((p.a, acc.into_iter().map(|v| v as f32).collect()));
                }
                if rg(p.b) {
                    let mut acc = vec![0f64; p.b_batches * k * n];
                    let mut tmp = vec![0f32; k * n];
                    for (pi, &(i, j)) in p.pairs.iter().enumerate() {
                        let at = transpose2(&av[i * m * k..(i + 1) * m * k], m, k);
                        gemm(&at, &g[pi * m * n..(pi + 1) * m * n], k, m, n, &mut tmp);
                        for (a, &t) in acc[j * k * n..(j + 1) * k * n].iter_mut().zip(&tmp) {
                            *a += t as f64;
                        }
                    }
                    res.push((p.b, acc.into_iter().map(|v| v as f32).collect()));
                }
            }
            Op::Add(a, b) => {
                if rg(*a) {
                    res.push((*a, reduce_to(g, out_shape, shape_of(*a))));
                }
                if rg(*b) {
                    res.push((*b, reduce_to(g, out_shape, shape_of(*b))));
                }
            }
            Op::Sub(a, b) => {
                if rg(*a) {
                    res.push((*a, reduce_to(g, out_shape, shape_of(*a))));
                }
                if rg(*b) {
                    let neg: Vec<f32> = g.iter().map(|v| -v).collect();
                    res.push((*b, reduce_to(&neg, out_shape, shape_of(*b))));
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let ia = broadcast_index(ta.shape(), out_shape);
                let ib = broadcast_index(tb.shape(), out_shape);
                if rg(*a) {
                    let full: Vec<f32> = g.iter().zip(&ib).map(|(&gv, &j)| gv * tb.data()[j]).collect();
                    res.push((*a, reduce_to(&full, out_shape, ta.shape())));
                }
                if rg(*b) {
                    let full: Vec<f32> = g.iter().zip(&ia).map(|(&gv, &i)| gv * ta.data()[i]).collect();
                    res.push((*b, reduce_to(&full, out_shape, tb.shape())));
                }
            }
            Op::Scale(a, c) => res.push((*a, g.iter().map(|v| v * c).collect())),
            Op::Permute(a, axes) => {
                let mut inv = vec![0; axes.len()];
                for (i, &ax) in axes.iter().enumerate() {
                    inv[ax] = i;
                }
                let gt = Tensor::new(out_shape.to_vec(), g.to_vec())?.permute(&inv)?;
                res.push((*a, gt.into_data()));
            }
            Op::Reshape(a) => res.push((*a, g.to_vec())),
            Op::Narrow { src, axis, start } => {
                let full = shape_of(*src);
                let (outer, len, inner) = split_axis(out_shape, *axis);
                let mut gs = vec![0f32; numel(full)];
                for o in 0..outer {
                    let dst = (o * full[*axis] + start) * inner;
                    gs[dst..dst + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                res.push((*src, gs));
            }
            Op::Softmax { src, axis } => {
                let y = node.value.data();
                let (outer, len, inner) = split_axis(out_shape, *axis);
                let mut gx = vec![0f32; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * len + j) * inner + i;
                        let dot: f64 = (0..len).map(|j| g[at(j)] as f64 * y[at(j)] as f64).sum();
                        for j in 0..len {
                            gx[at(j)] = (y[at(j)] as f64 * (g[at(j)] as f64 - dot)) as f32;
                        }
                    }
                }
                res.push((*src, gx));
            }
            Op::LayerNorm(s) => {
                let gamma = self.nodes[s.gamma.0].value.data();
                let d = gamma.len();
                let rows = g.len() / d;
                if rg(s.x) {
                    let mut gx = vec![0f32; g.len()];
                    for r in 0..rows {
                        let gr = &g[r * d..(r + 1) * d];
                        let nr = &s.normalized[r * d..(r + 1) * d];
                        let (mut mg, mut mgn) = (0f64, 0f64);
                        for c in 0..d {
                            let gh = gr[c] as f64 * gamma[c] as f64;
                            mg += gh;
                            mgn += gh * nr[c] as f64;
                        }
                        mg /= d as f64;
                        mgn /= d as f64;
                        for c in 0..d {
                            let gh = gr[c] as f64 * gamma[c] as f64;
                            gx[r * d + c] = (s.rstd[r] * (gh - mg - nr[c] as f64 * mgn)) as f32;
                        }
                    }
                    res.push((s.x, gx));
                }
                if rg(s.gamma) {
                    let mut acc = vec![0f64; d];
                    for (i, &gv) in g.iter().enumerate() {
                        acc[i % d] += gv as f64 * s.normalized[i] as f64;
                    }
                    res.push((s.gamma, acc.into_iter().map(|v| v as f32).collect()));
                }
                if rg(s.beta) {
                    res.push((s.beta, reduce_to(g, out_shape, &[d])));
                }
            }
            Op::Gelu(a) => {
                let x = self.nodes[a.0].value.data();
                let gx = x
                    .iter()
                    .zip(g)
                    .map(|(&xv, &gv)| (gv as f64 * gelu_grad(xv as f64)) as f32)
                    .collect();
                res.push((*a, gx));
            }
            Op::Sum(a) => res.push((*a, vec![g[0]; self.nodes[a.0].value.len()])),
            Op::MeanAxis { src, axis } => {
                let full = shape_of(*src);
                let (outer, len, inner) = split_axis(full, *axis);
                let mut gs = vec![0f32; numel(full)];
                let scale = 1.0 / len as f32;
                for o in 0..outer {
                    for j in 0..len {
                        for i in 0..inner {
                            gs[(o * len + j) * inner + i] = g[o * inner + i] * scale;
                        }
                    }
                }
                res.push((*src, gs));
            }
            Op::L2Norm(a) => {
                let norm = node.value.item() as f64;
                let x = self.nodes[a.0].value.data();
                let gx = if norm > 0.0 {
                    x.iter().map(|&v| (g[0] as f64 * v as f64 / norm) as f32).collect()
                } else {
                    vec![0.0; x.len()]
                };
                res.push((*a, gx));
            }
            Op::Gate { src, mask } => {
                let gx = g.iter().zip(mask).map(|(&gv, &m)| if m { gv } else { 0.0 }).collect();
                res.push((*src, gx));
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let c = probs.len() / targets.len();
                let scale = g[0] / targets.len() as f32;
                let mut gx: Vec<f32> = probs.iter().map(|&p| p * scale).collect();
                for (r, &t) in targets.iter().enumerate() {
                    gx[r * c + t] -= scale;
                }
                res.push((*logits, gx));
            }
        }
        Ok(res)
    }
}

/// `(outer, len, inner)` sizes around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        shape[..axis].iter().product(),
        shape[axis],
        shape[axis + 1..].iter().product(),
    )
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / SQRT_2)) + x * INV_SQRT_2PI * (-0.5 * x * x).exp()
}
