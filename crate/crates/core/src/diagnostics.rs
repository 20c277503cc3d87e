//! Loss-landscape probes and quantizer comparison tables.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::calibration::{
    calibrate_log2, calibrate_uniform, eta_candidates, layerwise_post_ln, search_eta_with,
    without_weight_quant, ActivationStats,
};
use crate::error::{Error, Result};
use crate::model::{HookSite, Model, QuantMap};
use crate::quant::{fake_quant_tensor, Granularity, QuantParams, Scheme};
use crate::sos::eval_block_loss;
use crate::teacher::TeacherCache;
use crate::tensor::Tensor;

/// The three quantization settings compared on the landscape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LandscapeConfig {
    /// Quantized weights, layer-wise activations.
    QuantWeightsLayerAct,
    /// Full-precision weights, layer-wise activations.
    FpWeightsLayerAct,
    /// Full-precision weights, channel-wise post-LayerNorm activations.
    FpWeightsChannelAct,
}

impl LandscapeConfig {
    pub const ALL: [LandscapeConfig; 3] = [
        LandscapeConfig::QuantWeightsLayerAct,
        LandscapeConfig::FpWeightsLayerAct,
        LandscapeConfig::FpWeightsChannelAct,
    ];

    pub fn label(self) -> &'static str {
        match self {
            LandscapeConfig::QuantWeightsLayerAct => "a",
            LandscapeConfig::FpWeightsLayerAct => "b",
            LandscapeConfig::FpWeightsChannelAct => "c",
        }
    }

    /// Derive this configuration's hook map from a full calibration map
    /// whose post-LayerNorm quantizers are channel-wise.
    pub fn map(
        self,
        calibrated: &QuantMap,
        stats: &std::collections::BTreeMap<String, ActivationStats>,
        bits_a: u32,
    ) -> Result<QuantMap> {
        let mut m = match self {
            LandscapeConfig::QuantWeightsLayerAct => calibrated.clone(),
            _ => without_weight_quant(calibrated),
        };
        if self != LandscapeConfig::FpWeightsChannelAct {
            layerwise_post_ln(&mut m, stats, bits_a)?;
        }
        Ok(m)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub points: usize,
    /// Half-width of each axis in units of the perturbed channel's standard
    /// deviation.
    pub radius: f64,
    /// Calibration samples evaluated per grid point.
    pub samples: usize,
    pub site: String,
    pub seed: u64,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            points: 21,
            radius: 0.5,
            samples: 64,
            site: HookSite::QkvWeight.suffix().into(),
            seed: 0,
        }
    }
}

impl GridSpec {
    pub fn coords(&self) -> Vec<f64> {
        if self.points == 1 {
            return vec![0.0];
        }
        (0..self.points)
            .map(|i| -self.radius + 2.0 * self.radius * i as f64 / (self.points - 1) as f64)
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LandscapeMeta {
    pub block: usize,
    pub label: String,
    pub site: String,
    pub channels: [usize; 2],
    pub samples: usize,
    pub seed: u64,
    pub min: f64,
    pub mean: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LandscapeGrid {
    pub alphas: Vec<f64>,
    pub betas: Vec<f64>,
    /// `losses[i][j]` is the loss at `(alphas[i], betas[j])`; non-finite
    /// values are stored as `+inf`.
    pub losses: Vec<Vec<f64>>,
    pub meta: LandscapeMeta,
}

impl LandscapeGrid {
    pub fn min(&self) -> f64 {
        self.losses.iter().flatten().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn mean(&self) -> f64 {
        let n = self.alphas.len() * self.betas.len();
        self.losses.iter().flatten().sum::<f64>() / n as f64
    }

    /// Header row of alphas; each following row starts with its beta.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("beta\\alpha");
        for a in &self.alphas {
            write!(s, ",{a}").expect("string write");
        }
        s.push('\n');
        for (j, b) in self.betas.iter().enumerate() {
            write!(s, "{b}").expect("string write");
            for row in &self.losses {
                write!(s, ",{}", row[j]).expect("string write");
            }
            s.push('\n');
        }
        s
    }

    /// Write `<stem>.csv` and `<stem>.json`.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let csv = dir.join(format!("{stem}.csv"));
        std::fs::write(&csv, self.to_csv()).map_err(|e| Error::io(&csv, e))?;
        let json = dir.join(format!("{stem}.json"));
        let body = serde_json::to_string_pretty(&self.meta)?;
        std::fs::write(&json, body).map_err(|e| Error::io(&json, e))
    }
}

fn weight_site(name: &str) -> Result<HookSite> {
    HookSite::ALL
        .into_iter()
        .find(|s| s.is_weight() && s.suffix() == name)
        .ok_or_else(|| Error::Config(format!("`{name}` is not a weight hook site")))
}

/// Perturb two seeded random output channels of one weight along random
/// directions and evaluate the block loss over a 2-D grid.
pub fn probe_landscape(
    model: &Model,
    block: usize,
    label: &str,
    map: &QuantMap,
    spec: &GridSpec,
    cache: &TeacherCache,
) -> Result<LandscapeGrid> {
    if block >= model.config.depth {
        return Err(Error::Config(format!("block {block} out of range")));
    }
    let site = weight_site(&spec.site)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let inputs_all = cache.input(block)?;
    let targets_all = cache.target(block)?;
    let total = inputs_all.shape()[0];
    let n = spec.samples.min(total).max(1);
    let mut rows = sample(&mut rng, total, n).into_vec();
    rows.sort_unstable();
    let inputs = inputs_all.select_rows(&rows)?;
    let targets = targets_all.select_rows(&rows)?;

    let base = model.blocks[block].weight(site).expect("weight site").clone();
    let (fan_in, out) = (base.shape()[0], base.shape()[1]);
    if out < 2 {
        return Err(Error::Config("perturbation needs at least two output channels".into()));
    }
    let picked = sample(&mut rng, out, 2).into_vec();
    let channels = [picked[0], picked[1]];
    let dirs: Vec<Vec<f64>> = channels
        .iter()
        .map(|&c| {
            let col: Vec<f64> = (0..fan_in).map(|i| base.data()[i * out + c] as f64).collect();
            let mean = col.iter().sum::<f64>() / fan_in as f64;
            let std = (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / fan_in as f64).sqrt();
            let g: Vec<f64> = (0..fan_in).map(|_| StandardNormal.sample(&mut rng)).collect();
            let rms = (g.iter().map(|v| v * v).sum::<f64>() / fan_in as f64).sqrt();
            g.iter().map(|v| v / rms * std).collect()
        })
        .collect();

    let coords = spec.coords();
    let mut blk = model.blocks[block].clone();
    let mut losses = vec![vec![0.0; coords.len()]; coords.len()];
    for (i, &a) in coords.iter().enumerate() {
        for (j, &b) in coords.iter().enumerate() {
            let w = blk.weight_mut(site).expect("weight site");
            w.data_mut().copy_from_slice(base.data());
            for r in 0..fan_in {
                w.data_mut()[r * out + channels[0]] += (a * dirs[0][r]) as f32;
                w.data_mut()[r * out + channels[1]] += (b * dirs[1][r]) as f32;
            }
            let l = eval_block_loss(&blk, block, model.config.heads, &inputs, &targets, map, n)?;
            losses[i][j] = if l.is_finite() { l } else { f64::INFINITY };
        }
    }
    let mut grid = LandscapeGrid {
        alphas: coords.clone(),
        betas: coords,
        losses,
        meta: LandscapeMeta {
            block,
            label: label.into(),
            site: spec.site.clone(),
            channels,
            samples: n,
            seed: spec.seed,
            min: 0.0,
            mean: 0.0,
        },
    };
    grid.meta.min = grid.min();
    grid.meta.mean = grid.mean();
    Ok(grid)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantizerRow {
    pub scheme: Scheme,
    pub bits: u32,
    pub mse: f64,
    pub max_error: f64,
    /// Share of elements at the largest code.
    pub max_code_fraction: f64,
    /// Share of elements whose unclamped code fell outside the code range.
    pub clamp_fraction: f64,
    /// Clamped share among elements strictly inside the sample range.
    pub interior_clamp_fraction: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eta: Option<f64>,
}

fn row(x: &Tensor, p: &QuantParams) -> Result<QuantizerRow> {
    let r = fake_quant_tensor(x, p)?;
    let (lo, hi) = (x.min(), x.max());
    let n = x.len() as f64;
    let mut sse = 0.0;
    let mut max_error = 0.0f64;
    let mut interior = 0usize;
    let mut interior_clamped = 0usize;
    for ((&v, &d), &ok) in x.data().iter().zip(r.dequantized.data()).zip(&r.in_range) {
        let e = (v as f64 - d as f64).abs();
        sse += e * e;
        max_error = max_error.max(e);
        if v > lo && v < hi {
            interior += 1;
            interior_clamped += (!ok) as usize;
        }
    }
    let max = p.max_code();
    Ok(QuantizerRow {
        scheme: p.scheme,
        bits: p.bits,
        mse: sse / n,
        max_error,
        max_code_fraction: r.integer_codes.data.iter().filter(|&&q| q == max).count() as f64 / n,
        clamp_fraction: r.in_range.iter().filter(|ok| !**ok).count() as f64 / n,
        interior_clamp_fraction: if interior == 0 {
            0.0
        } else {
            interior_clamped as f64 / interior as f64
        },
        eta: p.eta,
    })
}

/// Per-quantizer reconstruction statistics on non-negative samples: UQ with
/// min/max calibration, LQ with `s = max` and SULQ with a searched η.
pub fn quantizer_report(samples: &[f32], bits_list: &[u32]) -> Result<Vec<QuantizerRow>> {
    if let Some(v) = samples.iter().find(|v| !(**v >= 0.0)) {
        return Err(Error::Domain(format!("sample {v} is negative")));
    }
    let x = Tensor::from_vec(samples.to_vec());
    let mut rows = Vec::new();
    for &bits in bits_list {
        rows.push(row(&x, &calibrate_uniform(&x, bits, Granularity::Layer)?)?);
        rows.push(row(&x, &calibrate_log2(samples, bits)?)?);
        rows.push(row(&x, &search_eta_with(samples, bits, &eta_candidates())?.params)?);
    }
    Ok(rows)
}

/// Fixed-width text rendering of a quantizer report.
pub fn format_report(rows: &[QuantizerRow]) -> String {
    let mut s = String::from("scheme   bits  mse          max_err      max_code  clamped   interior\n");
    for r in rows {
        writeln!(
            s,
            "{:<8} {:>4}  {:<12.5e} {:<12.5e} {:<9.4} {:<9.4} {:.4}",
            format!("{:?}", r.scheme).to_lowercase(),
            r.bits,
            r.mse,
            r.max_error,
            r.max_code_fraction,
            r.clamp_fraction,
            r.interior_clamp_fraction
        )
        .expect("string write");
    }
    s
}
