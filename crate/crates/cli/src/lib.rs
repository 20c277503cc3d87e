//! Pipeline commands behind the `vitq` binary.
//!
//! Every command reads a JSON [`RunConfig`], never modifies its inputs and
//! writes only into the configured output directory.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use serde::{Deserialize, Serialize};
use vitq_core::calibration::{
    calibrate_model, collect_activation_stats, dataset_from_container, dataset_to_container,
    subset_indices, CalibOptions, CalibrationSet, SoftmaxQuantizer,
};
use vitq_core::checkpoint::Container;
use vitq_core::diagnostics::{format_report, probe_landscape, quantizer_report, GridSpec, LandscapeConfig, QuantizerRow};
use vitq_core::model::{hook_points, HookSite, Model, QuantMap};
use vitq_core::sos::{evaluate, run_stage1, run_stage2, run_stage3, Metrics, ReconstructionReport, SosConfig};
use vitq_core::teacher::{CacheOptions, TeacherCache};
use vitq_core::toy::{self, ToyConfig};
use vitq_core::Error;

pub const QUANT_KEY: &str = "quant.params";
pub const STAGE_KEY: &str = "sos.stage";
pub const REPORT_KEY: &str = "sos.report";
pub const CALIBRATION_FILE: &str = "calibration.json";
pub const FINAL_MODEL: &str = "quantized.qfck";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] Error),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    /// 1 configuration, 2 input/output, 3 numerical failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 1,
            CliError::Io { .. } => 2,
            CliError::Core(e) => match e {
                Error::Io { .. } | Error::Header(_) | Error::MissingTensor(_) | Error::ShapeMismatch { .. } => 2,
                Error::NonFinite { .. } | Error::Calibration(_) | Error::Range(_) | Error::Domain(_) => 3,
                _ => 1,
            },
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SoftmaxChoice {
    #[default]
    Sulq,
    Log2,
}

impl From<SoftmaxChoice> for SoftmaxQuantizer {
    fn from(c: SoftmaxChoice) -> Self {
        match c {
            SoftmaxChoice::Sulq => SoftmaxQuantizer::Sulq,
            SoftmaxChoice::Log2 => SoftmaxQuantizer::Log2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SosSection {
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default)]
    pub weight_decay: f64,
    /// Defaults to 200 at 6 bits and 1000 otherwise.
    #[serde(default)]
    pub iterations: Option<usize>,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub sequential_inputs: bool,
}

fn default_lr() -> f64 {
    4e-5
}
fn default_batch() -> usize {
    64
}
fn default_calib_size() -> usize {
    1024
}

impl Default for SosSection {
    fn default() -> Self {
        Self {
            lr: default_lr(),
            weight_decay: 0.0,
            iterations: None,
            batch_size: default_batch(),
            sequential_inputs: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LandscapeSection {
    #[serde(default)]
    pub block: usize,
    #[serde(default = "default_points")]
    pub points: usize,
    #[serde(default = "default_radius")]
    pub radius: f64,
    #[serde(default = "default_landscape_samples")]
    pub samples: usize,
    #[serde(default = "default_site")]
    pub site: String,
}

fn default_points() -> usize {
    21
}
fn default_radius() -> f64 {
    0.5
}
fn default_landscape_samples() -> usize {
    64
}
fn default_site() -> String {
    HookSite::QkvWeight.suffix().into()
}

impl Default for LandscapeSection {
    fn default() -> Self {
        Self {
            block: 0,
            points: default_points(),
            radius: default_radius(),
            samples: default_landscape_samples(),
            site: default_site(),
        }
    }
}

/// Pipeline configuration. Relative paths resolve against the directory of
/// the configuration file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub checkpoint: PathBuf,
    pub calibration_data: PathBuf,
    #[serde(default)]
    pub eval_data: Option<PathBuf>,
    pub bits_w: u32,
    pub bits_a: u32,
    #[serde(default = "default_calib_size")]
    pub calib_size: usize,
    #[serde(default)]
    pub sos: SosSection,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub post_softmax_quantizer: SoftmaxChoice,
    #[serde(default)]
    pub landscape: LandscapeSection,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let mut cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        resolve(&mut cfg.checkpoint);
        resolve(&mut cfg.calibration_data);
        resolve(&mut cfg.output_dir);
        if let Some(p) = cfg.eval_data.as_mut() {
            resolve(p);
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, b) in [("bits_w", self.bits_w), ("bits_a", self.bits_a)] {
            if !(2..=8).contains(&b) {
                return Err(CliError::Config(format!("{name} = {b} outside [2, 8]")));
            }
        }
        if self.calib_size == 0 {
            return Err(CliError::Config("calib_size must be positive".into()));
        }
        self.sos_config().validate()?;
        Ok(())
    }

    pub fn sos_config(&self) -> SosConfig {
        let mut c = SosConfig::new(self.bits_w, self.bits_a, self.seed);
        c.lr = self.sos.lr;
        c.weight_decay = self.sos.weight_decay;
        if let Some(it) = self.sos.iterations {
            c.iterations = it;
        }
        c.batch_size = self.sos.batch_size;
        c.sequential_inputs = self.sos.sequential_inputs;
        c
    }

    fn calib_options(&self) -> CalibOptions {
        CalibOptions {
            softmax: self.post_softmax_quantizer.into(),
            ..CalibOptions::sos(self.bits_w, self.bits_a)
        }
    }

    fn out(&self, name: &str) -> Result<PathBuf> {
        fs::create_dir_all(&self.output_dir).map_err(io_err(&self.output_dir))?;
        Ok(self.output_dir.join(name))
    }
}

fn require_file(p: &Path) -> Result<()> {
    if p.is_file() {
        Ok(())
    } else {
        Err(CliError::Io {
            path: p.to_path_buf(),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "file not found"),
        })
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut body = serde_json::to_string_pretty(value).map_err(Error::from)?;
    body.push('\n');
    fs::write(path, body).map_err(io_err(path))
}

fn load_model(path: &Path) -> Result<Model> {
    require_file(path)?;
    Ok(Model::load(path)?)
}

/// The seeded calibration subset of the configured dataset.
pub fn load_calibration(cfg: &RunConfig) -> Result<CalibrationSet> {
    require_file(&cfg.calibration_data)?;
    let c = Container::load(&cfg.calibration_data)?;
    let (tokens, labels) = dataset_from_container(&c)?;
    let idx = subset_indices(tokens.shape()[0], cfg.calib_size, cfg.seed)?;
    let tokens = tokens.select_rows(&idx)?;
    let labels = labels.map(|l| idx.iter().map(|&i| l[i]).collect());
    Ok(CalibrationSet::from_tokens(&tokens, labels, cfg.sos.batch_size)?)
}

fn check_dataset_fits(model: &Model, calib: &CalibrationSet) -> Result<()> {
    let shape = calib.batches[0].shape();
    if shape[1] != model.config.tokens || shape[2] != model.config.dim {
        return Err(Error::Data(format!(
            "dataset samples are {:?}, model expects [{}, {}]",
            &shape[1..],
            model.config.tokens,
            model.config.dim
        ))
        .into());
    }
    Ok(())
}

/// Quantizer map carried in a checkpoint's metadata, or an all-full-precision
/// map when absent.
pub fn quant_map_of(model: &Model) -> Result<QuantMap> {
    match model.metadata.get(QUANT_KEY) {
        Some(s) => serde_json::from_str(s)
            .map_err(|e| CliError::Config(format!("bad `{QUANT_KEY}` sidecar: {e}"))),
        None => Ok(hook_points(model.config.depth)
            .into_iter()
            .map(|(l, s)| (s.name(l), None))
            .collect()),
    }
}

pub fn read_quant_map(path: &Path) -> Result<QuantMap> {
    require_file(path)?;
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let map: QuantMap =
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    for (name, p) in &map {
        if let Some(p) = p {
            p.validate()
                .map_err(|e| CliError::Config(format!("`{name}`: {e}")))?;
        }
    }
    Ok(map)
}

/// Calibrate every hook point and write the calibration artifact.
pub fn cmd_calibrate(cfg: &RunConfig) -> Result<PathBuf> {
    cfg.validate()?;
    let model = load_model(&cfg.checkpoint)?;
    let calib = load_calibration(cfg)?;
    check_dataset_fits(&model, &calib)?;
    let (map, _) = calibrate_model(&model, &calib, &cfg.calib_options())?;
    let path = cfg.out(CALIBRATION_FILE)?;
    write_json(&path, &map)?;
    info!("wrote {} quantizers to {}", map.len(), path.display());
    Ok(path)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stages {
    One,
    Two,
    Three,
    All,
}

impl std::str::FromStr for Stages {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "1" => Ok(Stages::One),
            "2" => Ok(Stages::Two),
            "3" => Ok(Stages::Three),
            "all" => Ok(Stages::All),
            _ => Err(format!("unknown stage selection `{s}`; use 1, 2, 3 or all")),
        }
    }
}

pub fn stage_file(k: u8) -> String {
    format!("stage{k}.qfck")
}

fn save_stage(cfg: &RunConfig, model: &mut Model, map: &QuantMap, report: &ReconstructionReport, k: u8) -> Result<PathBuf> {
    model.metadata.insert(QUANT_KEY.into(), serde_json::to_string(map).map_err(Error::from)?);
    model.metadata.insert(STAGE_KEY.into(), k.to_string());
    model
        .metadata
        .insert(REPORT_KEY.into(), serde_json::to_string(report).map_err(Error::from)?);
    let path = cfg.out(&stage_file(k))?;
    model.save(&path)?;
    Ok(path)
}

fn load_stage(cfg: &RunConfig, k: u8) -> Result<(Model, QuantMap, ReconstructionReport)> {
    let path = cfg.output_dir.join(stage_file(k));
    let model = load_model(&path)?;
    if model.metadata.get(STAGE_KEY).map(String::as_str) != Some(&k.to_string()) {
        return Err(CliError::Config(format!("{} is not a stage-{k} checkpoint", path.display())));
    }
    let map = quant_map_of(&model)?;
    let report = match model.metadata.get(REPORT_KEY) {
        Some(s) => serde_json::from_str(s).map_err(|e| CliError::Config(format!("bad report sidecar: {e}")))?,
        None => ReconstructionReport::default(),
    };
    Ok((model, map, report))
}

/// Run the selected SOS stages, checkpointing after each. A single stage
/// resumes from the previous stage's checkpoint in the output directory.
pub fn cmd_optimize(cfg: &RunConfig, stages: Stages) -> Result<PathBuf> {
    cfg.validate()?;
    let sos = cfg.sos_config();
    let teacher = load_model(&cfg.checkpoint)?;
    let calib = load_calibration(cfg)?;
    check_dataset_fits(&teacher, &calib)?;
    let needs_cache = !matches!(stages, Stages::Two);
    let cache = if needs_cache {
        Some(TeacherCache::build(
            &teacher,
            &calib,
            &CacheOptions {
                spill_dir: Some(cfg.output_dir.join("teacher")),
                ..CacheOptions::default()
            },
        )?)
    } else {
        None
    };
    let range: &[u8] = match stages {
        Stages::One => &[1],
        Stages::Two => &[2],
        Stages::Three => &[3],
        Stages::All => &[1, 2, 3],
    };
    let mut last = PathBuf::new();
    let mut state: Option<(Model, QuantMap, ReconstructionReport)> = None;
    for &k in range {
        let (mut model, mut map, mut report) = match state.take() {
            Some(s) => s,
            None if k == 1 => {
                let map = read_quant_map(&cfg.output_dir.join(CALIBRATION_FILE))?;
                let mut m = teacher.clone();
                m.metadata.remove(QUANT_KEY);
                (m, map, ReconstructionReport::default())
            }
            None => load_stage(cfg, k - 1)?,
        };
        info!("running stage {k}");
        match k {
            1 => report.extend(run_stage1(&mut model, cache.as_ref().expect("cache"), &map, &sos)?),
            2 => report.plans.extend(run_stage2(&mut model, &mut map)?),
            _ => report.extend(run_stage3(&mut model, cache.as_ref().expect("cache"), &mut map, &sos)?),
        }
        last = save_stage(cfg, &mut model, &map, &report, k)?;
        if k == 3 {
            let fin = cfg.out(FINAL_MODEL)?;
            fs::copy(&last, &fin).map_err(io_err(&fin))?;
            write_json(&cfg.out("report.json")?, &report)?;
            last = fin;
        }
        state = Some((model, map, report));
    }
    Ok(last)
}

/// Metrics of a (quantized) model on a dataset against the configured
/// full-precision checkpoint.
pub fn cmd_eval(cfg: &RunConfig, model_path: &Path, dataset: &Path) -> Result<Metrics> {
    cfg.validate()?;
    let teacher = load_model(&cfg.checkpoint)?;
    let student = load_model(model_path)?;
    let map = quant_map_of(&student)?;
    require_file(dataset)?;
    let (tokens, labels) = dataset_from_container(&Container::load(dataset)?)?;
    let data = CalibrationSet::from_tokens(&tokens, labels, cfg.sos.batch_size)?;
    check_dataset_fits(&teacher, &data)?;
    let metrics = evaluate(&student, &map, &teacher, &data, cfg.sos.batch_size)?;
    write_json(&cfg.out("metrics.json")?, &metrics)?;
    Ok(metrics)
}

/// Landscapes of one block under the three quantization configurations.
pub fn cmd_landscape(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    let model = load_model(&cfg.checkpoint)?;
    let calib = load_calibration(cfg)?;
    check_dataset_fits(&model, &calib)?;
    let (map, stats) = calibrate_model(&model, &calib, &cfg.calib_options())?;
    let cache = TeacherCache::build(&model, &calib, &CacheOptions::default())?;
    let ls = &cfg.landscape;
    let spec = GridSpec {
        points: ls.points,
        radius: ls.radius,
        samples: ls.samples,
        site: ls.site.clone(),
        seed: cfg.seed,
    };
    let mut out = Vec::new();
    for c in LandscapeConfig::ALL {
        let m = c.map(&map, &stats, cfg.bits_a)?;
        let grid = probe_landscape(&model, ls.block, c.label(), &m, &spec, &cache)?;
        let stem = format!("landscape_block{}_{}", ls.block, c.label());
        grid.save(&cfg.output_dir, &stem)?;
        info!("{stem}: min {:.4} mean {:.4}", grid.min(), grid.mean());
        out.push(cfg.output_dir.join(format!("{stem}.csv")));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantizerReportFile {
    pub block: usize,
    pub samples: usize,
    pub rows: Vec<QuantizerRow>,
}

/// UQ/LQ/SULQ comparison on one block's post-Softmax activations.
pub fn cmd_report(cfg: &RunConfig, block: usize, bits: &[u32]) -> Result<QuantizerReportFile> {
    cfg.validate()?;
    let model = load_model(&cfg.checkpoint)?;
    if block >= model.config.depth {
        return Err(CliError::Config(format!("block {block} out of range")));
    }
    let calib = load_calibration(cfg)?;
    check_dataset_fits(&model, &calib)?;
    let stats = collect_activation_stats(&model, &calib, &[(block, HookSite::Softmax)])?;
    let st = &stats[&HookSite::Softmax.name(block)];
    let rows = quantizer_report(&st.samples, bits)?;
    print!("{}", format_report(&rows));
    let file = QuantizerReportFile {
        block,
        samples: st.samples.len(),
        rows,
    };
    write_json(&cfg.out("quantizer_report.json")?, &file)?;
    Ok(file)
}

/// Write the toy checkpoint, its calibration and evaluation sets and a
/// ready-to-run configuration into `dir`.
pub fn cmd_toy(dir: &Path, toy_cfg: &ToyConfig, iterations: usize) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let bundle = toy::build(toy_cfg)?;
    bundle.model.save(&dir.join("toy.qfck"))?;
    dataset_to_container(&bundle.calib.tokens, Some(&bundle.calib.labels)).save(&dir.join("calib.qfck"))?;
    dataset_to_container(&bundle.eval.tokens, Some(&bundle.eval.labels)).save(&dir.join("eval.qfck"))?;
    let cfg = RunConfig {
        checkpoint: "toy.qfck".into(),
        calibration_data: "calib.qfck".into(),
        eval_data: Some("eval.qfck".into()),
        bits_w: 3,
        bits_a: 3,
        calib_size: toy_cfg.calib_samples,
        sos: SosSection {
            lr: 1e-3,
            iterations: Some(iterations),
            ..SosSection::default()
        },
        output_dir: "out".into(),
        seed: toy_cfg.seed,
        post_softmax_quantizer: SoftmaxChoice::Sulq,
        landscape: LandscapeSection::default(),
    };
    let path = dir.join("config.json");
    write_json(&path, &cfg)?;
    let mut info_map = BTreeMap::new();
    info_map.insert("fp_accuracy", bundle.fp_accuracy);
    write_json(&dir.join("toy.json"), &info_map)?;
    Ok(path)
}
