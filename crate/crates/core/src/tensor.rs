//! Dense row-major `f32` tensors and the numeric kernels shared by the
//! autograd tape.
//!
//! Every reduction (matrix products, sums, norms) accumulates in `f64` and
//! stores the result as `f32`. Transposes and permutations always
//! materialize a new contiguous buffer; there are no strided views.

use std::sync::atomic::{AtomicBool, Ordering};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

static DETERMINISTIC: AtomicBool = AtomicBool::new(false);

/// Force every kernel onto the calling thread.
///
/// Kernels only ever split work by output row, so results are bitwise
/// identical either way; the flag pins execution to one thread as a hard
/// guarantee for reproducibility audits.
pub fn set_deterministic(on: bool) {
    DETERMINISTIC.store(on, Ordering::SeqCst);
}

pub fn is_deterministic() -> bool {
    DETERMINISTIC.load(Ordering::SeqCst)
}

/// Rows of work below which a matrix product never fans out to threads.
const PAR_MIN_WORK: usize = 1 << 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Contract(format!(
                "tensor shape {shape:?} has a zero dimension"
            )));
        }
        if numel(&shape) != data.len() {
            return Err(Error::Contract(format!(
                "shape {shape:?} holds {} elements but {} were given",
                numel(&shape),
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        assert!(shape.iter().all(|&d| d > 0), "zero dimension in {shape:?}");
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel(shape)],
        }
    }

    pub fn scalar(value: f32) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_vec(data: Vec<f32>) -> Self {
        let n = data.len();
        Self {
            shape: vec![n],
            data,
        }
    }

    /// Standard-normal entries scaled by `std`.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f32, rng: &mut R) -> Self {
        let data = (0..numel(shape))
            .map(|_| {
                let v: f32 = StandardNormal.sample(rng);
                v * std
            })
            .collect();
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], lo: f32, hi: f32, rng: &mut R) -> Self {
        let data = (0..numel(shape)).map(|_| rng.gen_range(lo..hi)).collect();
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Size of the last dimension, the channel axis for both activations and
    /// `[in, out]` weights.
    pub fn last_dim(&self) -> usize {
        *self.shape.last().expect("tensor has rank >= 1")
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn item(&self) -> f32 {
        self.data[0]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != self.len() {
            return Err(Error::Dimension {
                op: "reshape",
                lhs: self.shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        Tensor::new(shape.to_vec(), self.data.clone())
    }

    /// Swap the last two axes, materializing the result.
    pub fn transpose_last(&self) -> Result<Tensor> {
        let r = self.rank();
        if r < 2 {
            return Err(Error::Contract("transpose needs rank >= 2".into()));
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 2, r - 1);
        self.permute(&axes)
    }

    pub fn permute(&self, axes: &[usize]) -> Result<Tensor> {
        let r = self.rank();
        let mut seen = vec![false; r];
        if axes.len() != r || axes.iter().any(|&a| a >= r || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::Contract(format!(
                "invalid permutation {axes:?} for rank {r}"
            )));
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| self.shape[a]).collect();
        let in_strides = strides(&self.shape);
        // stride in the input for each output axis
        let mapped: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
        let mut out = Vec::with_capacity(self.len());
        let mut idx = vec![0usize; r];
        let mut offset = 0usize;
        for _ in 0..self.len() {
            out.push(self.data[offset]);
            for ax in (0..r).rev() {
                idx[ax] += 1;
                offset += mapped[ax];
                if idx[ax] < out_shape[ax] {
                    break;
                }
                offset -= mapped[ax] * out_shape[ax];
                idx[ax] = 0;
            }
        }
        Tensor::new(out_shape, out)
    }

    /// Select rows `[start, start + len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        if axis >= self.rank() || len == 0 || start + len > self.shape[axis] {
            return Err(Error::Contract(format!(
                "narrow({axis}, {start}, {len}) out of bounds for {:?}",
                self.shape
            )));
        }
        let outer: usize = self.shape[..axis].iter().product();
        let inner: usize = self.shape[axis + 1..].iter().product();
        let full = self.shape[axis];
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            out.extend_from_slice(&self.data[base..base + len * inner]);
        }
        let mut shape = self.shape.clone();
        shape[axis] = len;
        Tensor::new(shape, out)
    }

    /// Gather samples along the leading axis.
    pub fn select_rows(&self, rows: &[usize]) -> Result<Tensor> {
        let inner: usize = self.shape[1..].iter().product();
        let mut out = Vec::with_capacity(rows.len() * inner);
        for &r in rows {
            if r >= self.shape[0] {
                return Err(Error::Contract(format!(
                    "row {r} out of bounds for leading dimension {}",
                    self.shape[0]
                )));
            }
            out.extend_from_slice(&self.data[r * inner..(r + 1) * inner]);
        }
        let mut shape = self.shape.clone();
        shape[0] = rows.len();
        Tensor::new(shape, out)
    }

    /// Concatenate tensors along the leading axis.
    pub fn concat_rows(parts: &[Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let tail = &first.shape[1..];
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            if &p.shape[1..] != tail {
                return Err(Error::Dimension {
                    op: "concat",
                    lhs: first.shape.clone(),
                    rhs: p.shape.clone(),
                });
            }
            rows += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        let mut shape = first.shape.clone();
        shape[0] = rows;
        Tensor::new(shape, data)
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn min(&self) -> f32 {
        self.data.iter().copied().fold(f32::INFINITY, f32::min)
    }

    pub fn max(&self) -> f32 {
        self.data.iter().copied().fold(f32::NEG_INFINITY, f32::max)
    }

    pub fn sum_f64(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Bitwise equality, distinguishing `-0.0` from `0.0` and comparing NaN
    /// payloads.
    pub fn bitwise_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Numpy-style broadcast of two shapes.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let r = a.len().max(b.len());
    let mut out = vec![0; r];
    for i in 0..r {
        let da = if i + a.len() >= r { a[i + a.len() - r] } else { 1 };
        let db = if i + b.len() >= r { b[i + b.len() - r] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// For each flat index of `out_shape`, the flat index into a tensor of
/// shape `src` that broadcasts to it.
pub(crate) fn broadcast_index(src: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let n = numel(out_shape);
    if src == out_shape {
        return (0..n).collect();
    }
    let r = out_shape.len();
    let pad = r - src.len();
    let src_strides = strides(src);
    let eff: Vec<usize> = (0..r)
        .map(|i| {
            if i < pad || src[i - pad] == 1 {
                0
            } else {
                src_strides[i - pad]
            }
        })
        .collect();
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; r];
    let mut off = 0usize;
    for _ in 0..n {
        out.push(off);
        for ax in (0..r).rev() {
            idx[ax] += 1;
            off += eff[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            off -= eff[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    out
}

/// Sum a gradient of shape `out_shape` back down to the broadcast source
/// shape `src`.
pub(crate) fn reduce_to(grad: &[f32], out_shape: &[usize], src: &[usize]) -> Vec<f32> {
    if src == out_shape {
        return grad.to_vec();
    }
    let n_src = numel(src);
    // suffix broadcast (e.g. a bias vector) reduces with a strided sum
    if src.len() <= out_shape.len() && out_shape.ends_with(src) {
        let mut acc = vec![0f64; n_src];
        for chunk in grad.chunks(n_src) {
            for (a, &g) in acc.iter_mut().zip(chunk) {
                *a += g as f64;
            }
        }
        return acc.into_iter().map(|v| v as f32).collect();
    }
    let map = broadcast_index(src, out_shape);
    let mut acc = vec![0f64; n_src];
    for (&g, &i) in grad.iter().zip(&map) {
        acc[i] += g as f64;
    }
    acc.into_iter().map(|v| v as f32).collect()
}

/// `out[m×n] = a[m×k] · b[k×n]` with `f64` accumulation per output row.
pub(crate) fn gemm(a: &[f32], b: &[f32], m: usize, k: usize, n: usize, out: &mut [f32]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    let row = |(i, out_row): (usize, &mut [f32])| {
        let mut acc = vec![0f64; n];
        let a_row = &a[i * k..(i + 1) * k];
        for (kk, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let av = av as f64;
            let b_row = &b[kk * n..(kk + 1) * n];
            for (c, &bv) in acc.iter_mut().zip(b_row) {
                *c += av * bv as f64;
            }
        }
        for (o, c) in out_row.iter_mut().zip(acc) {
            *o = c as f32;
        }
    };
    if !is_deterministic() && m * k * n >= PAR_MIN_WORK && rayon::current_num_threads() > 1 {
        out.par_chunks_mut(n).enumerate().for_each(row);
    } else {
        out.chunks_mut(n).enumerate().for_each(row);
    }
}

/// Transpose a row-major `rows × cols` matrix.
pub(crate) fn transpose2(a: &[f32], rows: usize, cols: usize) -> Vec<f32> {
    let mut out = vec![0f32; a.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}
