//! Quantizer calibration: min/max scales, channel-wise post-LayerNorm
//! statistics and the SULQ shift-bias search.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::checkpoint::Container;
use crate::error::{Error, Result};
use crate::model::{HookSite, Hooks, Model, QuantMap};
use crate::quant::{fake_quant_tensor, round_half_away, Granularity, QuantParams, Scheme, MIN_SCALE};
use crate::tensor::Tensor;

/// Number of η candidates searched by [`search_eta`].
pub const ETA_GRID_SIZE: usize = 100;
/// Per-batch cap on post-Softmax values kept for the η search.
const SOFTMAX_SAMPLES_PER_BATCH: usize = 1 << 15;

/// Ordered calibration batches of embedded tokens, each `[B, N, D]`.
#[derive(Clone, Debug)]
pub struct CalibrationSet {
    pub batches: Vec<Tensor>,
    /// Per-sample labels in batch order, when the dataset has them.
    pub labels: Option<Vec<usize>>,
}

impl CalibrationSet {
    /// Split `[S, N, D]` tokens into batches of at most `batch_size`.
    pub fn from_tokens(tokens: &Tensor, labels: Option<Vec<usize>>, batch_size: usize) -> Result<Self> {
        if tokens.rank() != 3 {
            return Err(Error::Data(format!(
                "tokens must be [samples, tokens, dim], got {:?}",
                tokens.shape()
            )));
        }
        if batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        let s = tokens.shape()[0];
        if let Some(l) = &labels {
            if l.len() != s {
                return Err(Error::Data(format!("{} labels for {s} samples", l.len())));
            }
        }
        let mut batches = Vec::new();
        let mut start = 0;
        while start < s {
            let len = batch_size.min(s - start);
            batches.push(tokens.narrow(0, start, len)?);
            start += len;
        }
        Ok(Self { batches, labels })
    }

    /// Read a dataset container (`tokens` and optional `labels`).
    pub fn from_container(c: &Container, batch_size: usize) -> Result<Self> {
        let (tokens, labels) = dataset_from_container(c)?;
        Self::from_tokens(&tokens, labels, batch_size)
    }

    pub fn size(&self) -> usize {
        self.batches.iter().map(|b| b.shape()[0]).sum()
    }

    /// All samples as one `[S, N, D]` tensor.
    pub fn tokens(&self) -> Result<Tensor> {
        Tensor::concat_rows(&self.batches)
    }
}

/// Split a dataset container into tokens and integer labels.
pub fn dataset_from_container(c: &Container) -> Result<(Tensor, Option<Vec<usize>>)> {
    let tokens = c.get("tokens")?.clone();
    if tokens.rank() != 3 {
        return Err(Error::Data(format!(
            "`tokens` must be [samples, tokens, dim], got {:?}",
            tokens.shape()
        )));
    }
    let labels = match c.tensors.get("labels") {
        None => None,
        Some(l) => {
            let mut out = Vec::with_capacity(l.len());
            for &v in l.data() {
                if !(v >= 0.0 && v.fract() == 0.0) {
                    return Err(Error::Data(format!("label {v} is not a class index")));
                }
                out.push(v as usize);
            }
            if out.len() != tokens.shape()[0] {
                return Err(Error::Data(format!(
                    "{} labels for {} samples",
                    out.len(),
                    tokens.shape()[0]
                )));
            }
            Some(out)
        }
    };
    Ok((tokens, labels))
}

/// Build a dataset container from tokens and labels.
pub fn dataset_to_container(tokens: &Tensor, labels: Option<&[usize]>) -> Container {
    let mut c = Container::new();
    c.insert("tokens", tokens.clone());
    if let Some(l) = labels {
        c.insert("labels", Tensor::from_vec(l.iter().map(|&v| v as f32).collect()));
    }
    c
}

/// Pick `n` distinct samples with a seeded shuffle, keeping their original
/// order. Asking for more samples than exist is an error.
pub fn subset_indices(total: usize, n: usize, seed: u64) -> Result<Vec<usize>> {
    if n > total {
        return Err(Error::Config(format!(
            "calibration size {n} exceeds the {total} available samples"
        )));
    }
    if n == 0 {
        return Err(Error::Config("calibration size must be positive".into()));
    }
    let mut idx: Vec<usize> = (0..total).collect();
    if n < total {
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        idx.truncate(n);
        idx.sort_unstable();
    }
    Ok(idx)
}

/// Min/max uniform parameters for a `[min, max]` range.
pub fn uniform_range(min: f64, max: f64, bits: u32) -> (f64, i64) {
    let levels = ((1u64 << bits) - 1) as f64;
    let s = ((max - min) / levels).max(MIN_SCALE);
    let z = round_half_away(-min / s) as i64;
    (s, z)
}

/// Min/max uniform calibration with `s = (max - min) / (2^b - 1)` and
/// `z = round(-min / s)`. Channel granularity indexes the trailing axis.
pub fn calibrate_uniform(samples: &Tensor, bits: u32, granularity: Granularity) -> Result<QuantParams> {
    if samples.is_empty() {
        return Err(Error::Contract("calibration samples are empty".into()));
    }
    let (mins, maxs) = match granularity {
        Granularity::Layer => (vec![samples.min() as f64], vec![samples.max() as f64]),
        Granularity::Channel => {
            let c = samples.last_dim();
            let mut mins = vec![f64::INFINITY; c];
            let mut maxs = vec![f64::NEG_INFINITY; c];
            for row in samples.data().chunks(c) {
                for (j, &v) in row.iter().enumerate() {
                    mins[j] = mins[j].min(v as f64);
                    maxs[j] = maxs[j].max(v as f64);
                }
            }
            (mins, maxs)
        }
    };
    params_from_ranges(&mins, &maxs, bits, granularity)
}

fn params_from_ranges(mins: &[f64], maxs: &[f64], bits: u32, granularity: Granularity) -> Result<QuantParams> {
    if mins.iter().chain(maxs).any(|v| !v.is_finite()) {
        return Err(Error::Calibration("non-finite calibration range".into()));
    }
    let (scale, zero_point) = mins
        .iter()
        .zip(maxs)
        .map(|(&lo, &hi)| uniform_range(lo, hi, bits))
        .unzip();
    let p = QuantParams {
        bits,
        scheme: Scheme::Uniform,
        granularity,
        scale,
        zero_point,
        eta: None,
    };
    p.validate()?;
    Ok(p)
}

/// Log2 quantizer with the reference scale at the sample maximum.
pub fn calibrate_log2(samples: &[f32], bits: u32) -> Result<QuantParams> {
    let max = samples.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v)) as f64;
    if samples.is_empty() || !max.is_finite() {
        return Err(Error::Contract("calibration samples are empty".into()));
    }
    let p = QuantParams::log2(bits, max.max(MIN_SCALE));
    p.validate()?;
    Ok(p)
}

/// SULQ parameters for a fixed shift bias: the inner uniform quantizer is
/// min/max-calibrated on `-log2(x + eta)`.
pub fn sulq_params_for_eta(x: &[f32], bits: u32, eta: f64) -> Result<QuantParams> {
    if x.is_empty() {
        return Err(Error::Contract("calibration samples are empty".into()));
    }
    let t = crate::quant::sulq_transform(x, eta)?;
    let lo = t.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = t.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (s, z) = uniform_range(lo, hi, bits);
    let p = QuantParams::sulq(bits, s, z, eta);
    p.validate()?;
    Ok(p)
}

/// `ETA_GRID_SIZE` log-spaced values covering `[1e-6, 1]`.
pub fn eta_candidates() -> Vec<f64> {
    let (lo, hi) = (-6.0f64, 0.0f64);
    (0..ETA_GRID_SIZE)
        .map(|i| 10f64.powf(lo + (hi - lo) * i as f64 / (ETA_GRID_SIZE - 1) as f64))
        .collect()
}

/// Outcome of an η grid search.
#[derive(Clone, Debug)]
pub struct EtaSearch {
    pub params: QuantParams,
    /// `(eta, mse)` for every candidate, in grid order.
    pub errors: Vec<(f64, f64)>,
}

/// Mean squared error of `x` against its fake-quantized reconstruction.
pub fn quantization_mse(x: &Tensor, p: &QuantParams) -> Result<f64> {
    let r = fake_quant_tensor(x, p)?;
    let sse: f64 = x
        .data()
        .iter()
        .zip(r.dequantized.data())
        .map(|(&a, &b)| {
            let d = a as f64 - b as f64;
            d * d
        })
        .sum();
    Ok(sse / x.len() as f64)
}

/// Grid-search η over [`eta_candidates`] for minimum reconstruction MSE.
pub fn search_eta(samples: &Tensor, bits: u32) -> Result<QuantParams> {
    Ok(search_eta_with(samples.data(), bits, &eta_candidates())?.params)
}

/// Grid search over explicit candidates. Ties keep the earliest candidate,
/// which on an ascending grid is the smallest η.
pub fn search_eta_with(samples: &[f32], bits: u32, candidates: &[f64]) -> Result<EtaSearch> {
    if samples.is_empty() {
        return Err(Error::Contract("calibration samples are empty".into()));
    }
    if let Some(v) = samples.iter().find(|v| !(**v >= 0.0)) {
        return Err(Error::Domain(format!("post-Softmax sample {v} is negative")));
    }
    let x = Tensor::from_vec(samples.to_vec());
    let mut best: Option<(f64, QuantParams)> = None;
    let mut errors = Vec::with_capacity(candidates.len());
    for &eta in candidates {
        let p = sulq_params_for_eta(samples, bits, eta)?;
        let mse = quantization_mse(&x, &p)?;
        errors.push((eta, mse));
        if mse.is_finite() && best.as_ref().map_or(true, |(b, _)| mse < *b) {
            best = Some((mse, p));
        }
    }
    match best {
        Some((_, params)) => Ok(EtaSearch { params, errors }),
        None => Err(Error::Calibration("every η candidate gave a non-finite error".into())),
    }
}

/// Running statistics of one activation hook point.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationStats {
    pub min: f32,
    pub max: f32,
    pub channel_min: Vec<f32>,
    pub channel_max: Vec<f32>,
    /// Strided post-Softmax values kept for the η search.
    pub samples: Vec<f32>,
}

impl ActivationStats {
    pub fn from_tensor(x: &Tensor, keep_samples: bool) -> Self {
        let c = x.last_dim();
        let mut channel_min = vec![f32::INFINITY; c];
        let mut channel_max = vec![f32::NEG_INFINITY; c];
        for row in x.data().chunks(c) {
            for (j, &v) in row.iter().enumerate() {
                channel_min[j] = channel_min[j].min(v);
                channel_max[j] = channel_max[j].max(v);
            }
        }
        let samples = if keep_samples {
            let stride = x.len().div_ceil(SOFTMAX_SAMPLES_PER_BATCH).max(1);
            x.data().iter().step_by(stride).copied().collect()
        } else {
            Vec::new()
        };
        Self {
            min: x.min(),
            max: x.max(),
            channel_min,
            channel_max,
            samples,
        }
    }

    pub fn merge(&mut self, other: &ActivationStats) {
        self.min = self.min.min(other.min);
        self.max = self.max.max(other.max);
        for (a, b) in self.channel_min.iter_mut().zip(&other.channel_min) {
            *a = a.min(*b);
        }
        for (a, b) in self.channel_max.iter_mut().zip(&other.channel_max) {
            *a = a.max(*b);
        }
        self.samples.extend_from_slice(&other.samples);
    }

    pub fn uniform(&self, bits: u32, granularity: Granularity) -> Result<QuantParams> {
        match granularity {
            Granularity::Layer => params_from_ranges(&[self.min as f64], &[self.max as f64], bits, granularity),
            Granularity::Channel => {
                let lo: Vec<f64> = self.channel_min.iter().map(|&v| v as f64).collect();
                let hi: Vec<f64> = self.channel_max.iter().map(|&v| v as f64).collect();
                params_from_ranges(&lo, &hi, bits, granularity)
            }
        }
    }
}

/// Records activation statistics as a [`Hooks`] implementation.
struct StatsRecorder<'a> {
    wanted: &'a [(usize, HookSite)],
    stats: BTreeMap<String, ActivationStats>,
}

impl Hooks for StatsRecorder<'_> {
    fn apply(&mut self, tape: &mut Tape, block: usize, site: HookSite, x: Var) -> Result<Var> {
        if !site.is_weight() && self.wanted.contains(&(block, site)) {
            let s = ActivationStats::from_tensor(tape.value(x), site == HookSite::Softmax);
            self.stats
                .entry(site.name(block))
                .and_modify(|acc| acc.merge(&s))
                .or_insert(s);
        }
        Ok(x)
    }
}

/// Full-precision forward over every calibration batch, accumulating
/// min/max statistics for the requested activation hook points.
pub fn collect_activation_stats(
    model: &Model,
    calib: &CalibrationSet,
    hook_points: &[(usize, HookSite)],
) -> Result<BTreeMap<String, ActivationStats>> {
    let mut rec = StatsRecorder {
        wanted: hook_points,
        stats: BTreeMap::new(),
    };
    for batch in &calib.batches {
        model.forward_blocks(batch, 0..model.config.depth, &mut rec)?;
    }
    Ok(rec.stats)
}

/// Which quantizer handles the post-Softmax attention probabilities.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SoftmaxQuantizer {
    Sulq,
    Log2,
}

#[derive(Clone, Copy, Debug)]
pub struct CalibOptions {
    pub bits_w: u32,
    pub bits_a: u32,
    pub softmax: SoftmaxQuantizer,
    /// Granularity of the two post-LayerNorm activation quantizers.
    pub post_ln: Granularity,
}

impl CalibOptions {
    pub fn sos(bits_w: u32, bits_a: u32) -> Self {
        Self {
            bits_w,
            bits_a,
            softmax: SoftmaxQuantizer::Sulq,
            post_ln: Granularity::Channel,
        }
    }
}

/// Calibrate every hook point of `model`: channel-wise UQ for weights,
/// layer-wise UQ for activations (post-LayerNorm sites per `opts.post_ln`)
/// and SULQ or LQ for post-Softmax probabilities.
pub fn calibrate_model(
    model: &Model,
    calib: &CalibrationSet,
    opts: &CalibOptions,
) -> Result<(QuantMap, BTreeMap<String, ActivationStats>)> {
    let points = crate::model::hook_points(model.config.depth);
    let stats = collect_activation_stats(model, calib, &points)?;
    let mut map = QuantMap::new();
    for &(l, site) in &points {
        let name = site.name(l);
        let p = if let Some(w) = model.blocks[l].weight(site) {
            calibrate_uniform(w, opts.bits_w, Granularity::Channel)?
        } else {
            let st = stats
                .get(&name)
                .ok_or_else(|| Error::Calibration(format!("no statistics for `{name}`")))?;
            activation_params(st, site, opts)?
        };
        map.insert(name, Some(p));
    }
    Ok((map, stats))
}

pub fn activation_params(st: &ActivationStats, site: HookSite, opts: &CalibOptions) -> Result<QuantParams> {
    match site {
        HookSite::Softmax => match opts.softmax {
            SoftmaxQuantizer::Sulq => {
                Ok(search_eta_with(&st.samples, opts.bits_a, &eta_candidates())?.params)
            }
            SoftmaxQuantizer::Log2 => calibrate_log2(&st.samples, opts.bits_a),
        },
        s if s.is_post_layernorm() => st.uniform(opts.bits_a, opts.post_ln),
        _ => st.uniform(opts.bits_a, Granularity::Layer),
    }
}

/// Replace post-LayerNorm quantizers with layer-wise ones calibrated from
/// the same statistics.
pub fn layerwise_post_ln(
    map: &mut QuantMap,
    stats: &BTreeMap<String, ActivationStats>,
    bits: u32,
) -> Result<()> {
    for (name, entry) in map.iter_mut() {
        let Some((_, site)) = HookSite::parse(name) else { continue };
        if site.is_post_layernorm() && entry.is_some() {
            let st = stats
                .get(name)
                .ok_or_else(|| Error::Calibration(format!("no statistics for `{name}`")))?;
            *entry = Some(st.uniform(bits, Granularity::Layer)?);
        }
    }
    Ok(())
}

/// Set every weight hook point to full precision.
pub fn without_weight_quant(map: &QuantMap) -> QuantMap {
    map.iter()
        .map(|(k, v)| {
            let weight = HookSite::parse(k).is_some_and(|(_, s)| s.is_weight());
            (k.clone(), if weight { None } else { v.clone() })
        })
        .collect()
}
