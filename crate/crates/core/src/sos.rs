//! Three-stage smooth optimization under block-wise reconstruction.
//!
//! 1. Tune full-precision weights against quantized activations, with the
//!    post-LayerNorm quantizers channel-wise.
//! 2. Fold those channel-wise quantizers into layer-wise ones
//!    ([`crate::reparam`]).
//! 3. Tune again with weights and activations both quantized, then
//!    materialize the weights on their grid.
//!
//! Every block is reconstructed in isolation: the student block consumes the
//! cached full-precision input and is trained to match the cached
//! full-precision output with the loss `‖X_l − X̄_l‖₂`.

use log::{debug, info};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::calibration::{
    calibrate_model, calibrate_uniform, layerwise_post_ln, without_weight_quant, CalibOptions,
    CalibrationSet, SoftmaxQuantizer,
};
use crate::error::{Error, Result};
use crate::model::{block_apply, block_forward, HookSite, Model, QuantHooks, QuantMap, ViTBlock};
use crate::optim::{cosine_lr, Adam};
use crate::quant::{fake_quant_tensor, Granularity};
use crate::reparam::{apply_to_block, build_plan, ReparamPlan};
use crate::teacher::{CacheOptions, TeacherCache};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SosConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub iterations: usize,
    pub batch_size: usize,
    pub bits_w: u32,
    pub bits_a: u32,
    pub seed: u64,
    /// Feed each student block the quantized output of the already
    /// optimized blocks instead of the cached full-precision input.
    #[serde(default)]
    pub sequential_inputs: bool,
}

impl SosConfig {
    /// Defaults: lr 4e-5, no weight decay, batch 64, and 200 iterations at
    /// 6 bits or 1000 otherwise.
    pub fn new(bits_w: u32, bits_a: u32, seed: u64) -> Self {
        Self {
            lr: 4e-5,
            weight_decay: 0.0,
            iterations: default_iterations(bits_w, bits_a),
            batch_size: 64,
            bits_w,
            bits_a,
            seed,
            sequential_inputs: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr {} must be positive", self.lr)));
        }
        if self.iterations == 0 {
            return Err(Error::Config("iterations must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("weight decay must be non-negative".into()));
        }
        for b in [self.bits_w, self.bits_a] {
            if !(2..=8).contains(&b) {
                return Err(Error::Config(format!("bit width {b} outside [2, 8]")));
            }
        }
        Ok(())
    }

    fn validate_allowing_zero_iterations(&self) -> Result<()> {
        SosConfig {
            iterations: self.iterations.max(1),
            ..self.clone()
        }
        .validate()
    }
}

pub fn default_iterations(bits_w: u32, bits_a: u32) -> usize {
    if bits_w == 6 && bits_a == 6 {
        200
    } else {
        1000
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub block: usize,
    pub stage: u8,
    pub iteration: usize,
    pub loss: f64,
}

/// Calibration-set loss of one block before and after a stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockSummary {
    pub block: usize,
    pub stage: u8,
    pub before: f64,
    pub after: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionReport {
    pub records: Vec<LossRecord>,
    pub summaries: Vec<BlockSummary>,
    /// Reparameterization plans by hook-point name.
    pub plans: Vec<(String, ReparamPlan)>,
}

impl ReconstructionReport {
    pub fn extend(&mut self, other: ReconstructionReport) {
        self.records.extend(other.records);
        self.summaries.extend(other.summaries);
        self.plans.extend(other.plans);
        self.records
            .sort_by_key(|r| (r.block, r.stage, r.iteration));
        self.summaries.sort_by_key(|s| (s.block, s.stage));
    }

    /// Mean over blocks of the final loss of the latest stage.
    pub fn final_mean_loss(&self) -> Option<f64> {
        let stage = self.summaries.iter().map(|s| s.stage).max()?;
        let last: Vec<f64> = self
            .summaries
            .iter()
            .filter(|s| s.stage == stage)
            .map(|s| s.after)
            .collect();
        Some(last.iter().sum::<f64>() / last.len() as f64)
    }
}

/// `‖fp_out − q_out‖₂` as a scalar tensor.
pub fn block_loss(fp_out: &Tensor, q_out: &Tensor) -> Result<Tensor> {
    if fp_out.shape() != q_out.shape() {
        return Err(Error::Contract(format!(
            "block outputs differ in shape: {:?} vs {:?}",
            fp_out.shape(),
            q_out.shape()
        )));
    }
    let s: f64 = fp_out
        .data()
        .iter()
        .zip(q_out.data())
        .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
        .sum();
    Ok(Tensor::scalar(s.sqrt() as f32))
}

fn block_loss_var(tape: &mut Tape, target: Var, out: Var) -> Result<Var> {
    let d = tape.sub(target, out)?;
    Ok(tape.l2_norm(d))
}

/// Mean block loss over consecutive `batch_size` chunks of the inputs.
pub fn eval_block_loss(
    blk: &ViTBlock,
    block: usize,
    heads: usize,
    inputs: &Tensor,
    targets: &Tensor,
    map: &QuantMap,
    batch_size: usize,
) -> Result<f64> {
    let s = inputs.shape()[0];
    let mut total = 0.0;
    let mut chunks = 0usize;
    let mut start = 0;
    while start < s {
        let n = batch_size.min(s - start);
        let x = inputs.narrow(0, start, n)?;
        let y = targets.narrow(0, start, n)?;
        let out = block_apply(&x, blk, heads, block, &mut QuantHooks { map })?;
        total += block_loss(&y, &out)?.item() as f64;
        chunks += 1;
        start += n;
    }
    Ok(total / chunks as f64)
}

fn stage_rng(seed: u64, stage: u8, block: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((stage as u64) << 32) | block as u64);
    rng
}

/// Adam fine-tuning of one block's twelve parameters with frozen quantizers.
#[allow(clippy::too_many_arguments)]
fn optimize_block(
    blk: &mut ViTBlock,
    block: usize,
    heads: usize,
    inputs: &Tensor,
    targets: &Tensor,
    map: &QuantMap,
    cfg: &SosConfig,
    stage: u8,
) -> Result<(Vec<LossRecord>, BlockSummary)> {
    let samples = inputs.shape()[0];
    let batch = cfg.batch_size.min(samples);
    let before = eval_block_loss(blk, block, heads, inputs, targets, map, cfg.batch_size)?;
    let sizes: Vec<usize> = blk.params().iter().map(|t| t.len()).collect();
    let mut opt = Adam::new(&sizes, cfg.weight_decay);
    let mut rng = stage_rng(cfg.seed, stage, block);
    let mut records = Vec::with_capacity(cfg.iterations);
    for it in 0..cfg.iterations {
        let idx = sample(&mut rng, samples, batch).into_vec();
        let x = inputs.select_rows(&idx)?;
        let y = targets.select_rows(&idx)?;
        let mut tape = Tape::new();
        let vars = blk.on_tape(&mut tape, true);
        let xv = tape.constant(x);
        let yv = tape.constant(y);
        let out = block_forward(&mut tape, xv, &vars, heads, block, &mut QuantHooks { map })?;
        let loss = block_loss_var(&mut tape, yv, out)?;
        let lv = tape.value(loss).item() as f64;
        if !lv.is_finite() {
            return Err(Error::NonFinite {
                block,
                stage,
                iteration: it,
            });
        }
        tape.backward(loss)?;
        let zero: Vec<Vec<f32>> = sizes.iter().map(|&n| vec![0.0; n]).collect();
        let grads: Vec<&[f32]> = vars
            .all()
            .iter()
            .zip(&zero)
            .map(|(&v, z)| tape.grad(v).unwrap_or(z))
            .collect();
        let lr = cosine_lr(cfg.lr, it, cfg.iterations);
        opt.step(&mut blk.params_mut(), &grads, lr);
        records.push(LossRecord {
            block,
            stage,
            iteration: it,
            loss: lv,
        });
        if it % 50 == 0 {
            debug!("stage {stage} block {block} iter {it}: loss {lv:.6}");
        }
    }
    if !blk.params().iter().all(|t| t.all_finite()) {
        return Err(Error::NonFinite {
            block,
            stage,
            iteration: cfg.iterations,
        });
    }
    let after = eval_block_loss(blk, block, heads, inputs, targets, map, cfg.batch_size)?;
    info!("stage {stage} block {block}: loss {before:.6} -> {after:.6}");
    Ok((
        records,
        BlockSummary {
            block,
            stage,
            before,
            after,
        },
    ))
}

fn quantized_outputs(model: &Model, l: usize, inputs: &Tensor, map: &QuantMap, batch: usize) -> Result<Tensor> {
    let s = inputs.shape()[0];
    let mut parts = Vec::new();
    let mut start = 0;
    while start < s {
        let n = batch.min(s - start);
        let x = inputs.narrow(0, start, n)?;
        parts.push(block_apply(&x, &model.blocks[l], model.config.heads, l, &mut QuantHooks { map })?);
        start += n;
    }
    Tensor::concat_rows(&parts)
}

fn optimize_all(
    model: &mut Model,
    cache: &TeacherCache,
    map: &QuantMap,
    cfg: &SosConfig,
    stage: u8,
) -> Result<ReconstructionReport> {
    cfg.validate_allowing_zero_iterations()?;
    let mut report = ReconstructionReport::default();
    let mut student_in: Option<Tensor> = None;
    for l in 0..model.config.depth {
        let inputs = match (&student_in, cfg.sequential_inputs) {
            (Some(x), true) => x.clone(),
            _ => cache.input(l)?,
        };
        let targets = cache.target(l)?;
        let heads = model.config.heads;
        let (records, summary) =
            optimize_block(&mut model.blocks[l], l, heads, &inputs, &targets, map, cfg, stage)?;
        report.records.extend(records);
        report.summaries.push(summary);
        if cfg.sequential_inputs {
            student_in = Some(quantized_outputs(model, l, &inputs, map, cfg.batch_size)?);
        }
    }
    Ok(report)
}

/// Stage one: full-precision weights, quantized activations.
pub fn run_stage1(
    model: &mut Model,
    cache: &TeacherCache,
    map: &QuantMap,
    cfg: &SosConfig,
) -> Result<ReconstructionReport> {
    let fp_weights = without_weight_quant(map);
    optimize_all(model, cache, &fp_weights, cfg, 1)
}

/// Stage two: fold every channel-wise post-LayerNorm quantizer into the
/// model, leaving layer-wise quantizers in `map`.
pub fn run_stage2(model: &mut Model, map: &mut QuantMap) -> Result<Vec<(String, ReparamPlan)>> {
    let mut plans = Vec::new();
    for l in 0..model.config.depth {
        for site in [HookSite::QkvInput, HookSite::Fc1Input] {
            let name = site.name(l);
            let Some(Some(p)) = map.get(&name) else { continue };
            if p.granularity != Granularity::Channel {
                continue;
            }
            let plan = build_plan(p)?;
            apply_to_block(&plan, &mut model.blocks[l], site)?;
            map.insert(name.clone(), Some(plan.layer_params()));
            plans.push((name, plan));
        }
    }
    Ok(plans)
}

/// Channel-wise weight quantizers calibrated from the current weights.
pub fn calibrate_weights(model: &Model, map: &mut QuantMap, bits_w: u32) -> Result<()> {
    for (l, blk) in model.blocks.iter().enumerate() {
        for site in HookSite::ALL.into_iter().filter(|s| s.is_weight()) {
            let w = blk.weight(site).expect("weight site");
            map.insert(site.name(l), Some(calibrate_uniform(w, bits_w, Granularity::Channel)?));
        }
    }
    Ok(())
}

/// Replace every weight by `dequant(quant(w))` under its quantizer.
pub fn materialize_weights(model: &mut Model, map: &QuantMap) -> Result<()> {
    for l in 0..model.config.depth {
        for site in HookSite::ALL.into_iter().filter(|s| s.is_weight()) {
            if let Some(Some(p)) = map.get(&site.name(l)) {
                let w = model.blocks[l].weight_mut(site).expect("weight site");
                *w = fake_quant_tensor(w, p)?.dequantized;
            }
        }
    }
    Ok(())
}

fn check_layerwise_post_ln(map: &QuantMap) -> Result<()> {
    for (name, p) in map {
        let post_ln = HookSite::parse(name).is_some_and(|(_, s)| s.is_post_layernorm());
        if post_ln && p.as_ref().is_some_and(|p| p.granularity == Granularity::Channel) {
            return Err(Error::Config(format!(
                "`{name}` is still channel-wise; run the reparameterization stage first"
            )));
        }
    }
    Ok(())
}

/// Stage three: weights and activations quantized, weights materialized on
/// their grid at the end.
pub fn run_stage3(
    model: &mut Model,
    cache: &TeacherCache,
    map: &mut QuantMap,
    cfg: &SosConfig,
) -> Result<ReconstructionReport> {
    check_layerwise_post_ln(map)?;
    calibrate_weights(model, map, cfg.bits_w)?;
    let report = optimize_all(model, cache, map, cfg, 3)?;
    materialize_weights(model, map)?;
    Ok(report)
}

/// Which parts of the pipeline run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// All three stages.
    Full,
    /// Layer-wise calibration then stage three only.
    Stage3Only,
    /// Layer-wise calibration and weight rounding, no fine-tuning.
    NoOptimization,
}

#[derive(Clone, Debug)]
pub struct SosOutcome {
    pub model: Model,
    pub map: QuantMap,
    pub report: ReconstructionReport,
}

/// Calibrate and run one pipeline variant on a copy of `model`.
pub fn run_pipeline(
    model: &Model,
    calib: &CalibrationSet,
    cfg: &SosConfig,
    softmax: SoftmaxQuantizer,
    variant: Variant,
) -> Result<SosOutcome> {
    cfg.validate_allowing_zero_iterations()?;
    let cache = TeacherCache::build(model, calib, &CacheOptions::default())?;
    let opts = CalibOptions {
        softmax,
        ..CalibOptions::sos(cfg.bits_w, cfg.bits_a)
    };
    let (mut map, stats) = calibrate_model(model, calib, &opts)?;
    let mut student = model.clone();
    let mut report = ReconstructionReport::default();
    match variant {
        Variant::Full => {
            report.extend(run_stage1(&mut student, &cache, &map, cfg)?);
            report.plans = run_stage2(&mut student, &mut map)?;
            report.extend(run_stage3(&mut student, &cache, &mut map, cfg)?);
        }
        Variant::Stage3Only => {
            layerwise_post_ln(&mut map, &stats, cfg.bits_a)?;
            report.extend(run_stage3(&mut student, &cache, &mut map, cfg)?);
        }
        Variant::NoOptimization => {
            layerwise_post_ln(&mut map, &stats, cfg.bits_a)?;
            materialize_weights(&mut student, &map)?;
        }
    }
    Ok(SosOutcome {
        model: student,
        map,
        report,
    })
}

/// Evaluation of a quantized model against the full-precision teacher.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// Per-block loss on cached full-precision inputs.
    pub block_losses: Vec<f64>,
    pub mean_block_loss: f64,
    pub accuracy: Option<f64>,
    pub samples: usize,
}

/// Block losses on isolated full-precision inputs and, when labels are
/// present, top-1 accuracy of the fully quantized forward pass.
pub fn evaluate(
    student: &Model,
    map: &QuantMap,
    teacher: &Model,
    data: &CalibrationSet,
    batch_size: usize,
) -> Result<Metrics> {
    let cache = TeacherCache::build(teacher, data, &CacheOptions::default())?;
    let mut block_losses = Vec::with_capacity(student.config.depth);
    for l in 0..student.config.depth {
        block_losses.push(eval_block_loss(
            &student.blocks[l],
            l,
            student.config.heads,
            &cache.input(l)?,
            &cache.target(l)?,
            map,
            batch_size,
        )?);
    }
    let mean_block_loss = block_losses.iter().sum::<f64>() / block_losses.len().max(1) as f64;
    let accuracy = match &data.labels {
        Some(labels) => Some(accuracy(student, map, data, labels)?),
        None => None,
    };
    Ok(Metrics {
        block_losses,
        mean_block_loss,
        accuracy,
        samples: data.size(),
    })
}

fn accuracy(model: &Model, map: &QuantMap, data: &CalibrationSet, labels: &[usize]) -> Result<f64> {
    let mut correct = 0usize;
    let mut seen = 0usize;
    for batch in &data.batches {
        let out = model.forward_blocks(batch, 0..model.config.depth, &mut QuantHooks { map })?;
        let logits = model.head_logits(&out)?;
        let c = logits.last_dim();
        for row in logits.data().chunks(c) {
            let label = *labels
                .get(seen)
                .ok_or_else(|| Error::Data("fewer labels than samples".into()))?;
            if label >= c {
                return Err(Error::Data(format!("label {label} out of range for {c} classes")));
            }
            let pred = argmax(row);
            correct += (pred == label) as usize;
            seen += 1;
        }
    }
    Ok(correct as f64 / seen.max(1) as f64)
}

pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}
