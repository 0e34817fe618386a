//! Subcommand implementations. Each takes a fully resolved config, validates
//! it before touching the filesystem, and returns a serialisable report.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use microdiff::contour::{descriptor_population_stats, fourier_descriptor, trace_boundaries, FourierDescriptor};
use microdiff::denoiser::{
    fit, load_checkpoint, save_checkpoint, Architecture, DenoiserModel, TrainSettings,
};
use microdiff::descriptors::{lineal_path, s2_fft, two_point_correlation, DescriptorCurve};
use microdiff::diffusion::{denoise_latent, initial_latent, sample_many, slerp, SamplerConfig, StepSpacing};
use microdiff::io::{read_microstructure, write_csv, write_float_field, write_microstructure};
use microdiff::lbm::{classify_permeability, darcy_permeability, LbmConfig, LbmState};
use microdiff::stats::SkewNormalFit;
use microdiff::synth::{GenSpec, GeneratorKind};
use microdiff::{Error, Field, Microstructure, NoiseSchedule, ScheduleConfig};
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::config::{config_hash, hex_digest};
use crate::dataset::{image_name, load_datasets, write_dataset};

pub const TOOL_VERSION: &str = concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION"));

fn invalid(msg: impl Into<String>) -> anyhow::Error {
    Error::Invalid(msg.into()).into()
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, serde_json::to_vec_pretty(value)?)
        .with_context(|| format!("writing {}", path.display()))
}

/// SHA-256 over the shape (little-endian u64 per axis) and the phase bytes.
pub fn sample_hash(ms: &Microstructure) -> String {
    let mut bytes = Vec::with_capacity(ms.len() + 8 * ms.dims());
    for &n in ms.shape() {
        bytes.extend_from_slice(&(n as u64).to_le_bytes());
    }
    bytes.extend_from_slice(ms.phases());
    hex_digest(&bytes)
}

/// Concatenate equally shaped frames along the first axis.
pub fn stitch(frames: &[Microstructure]) -> Result<Microstructure> {
    let first = frames.first().ok_or_else(|| invalid("no frames to stitch"))?;
    let shape = first.shape();
    let nx = shape[0];
    let mut out_shape = shape.to_vec();
    out_shape[0] = nx * frames.len();
    let rows = first.len() / nx;
    let mut phase = Vec::with_capacity(first.len() * frames.len());
    for r in 0..rows {
        for f in frames {
            phase.extend_from_slice(&f.phases()[r * nx..(r + 1) * nx]);
        }
    }
    Ok(Microstructure::new(&out_shape, phase, false)?)
}

// ---------------------------------------------------------------- generate

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerateConfig {
    pub spec: GenSpec,
    pub count: usize,
    pub label: Option<usize>,
    pub out: PathBuf,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        Self {
            spec: GenSpec::default(),
            count: 100,
            label: None,
            out: PathBuf::from("dataset"),
        }
    }
}

#[derive(Debug, Serialize)]
pub struct GenerateReport {
    pub out: PathBuf,
    pub count: usize,
    pub mean_volume_fraction: f64,
}

pub fn cmd_generate(cfg: &GenerateConfig) -> Result<GenerateReport> {
    cfg.spec.validate()?;
    if cfg.count == 0 {
        return Err(invalid("count must be positive"));
    }
    let m = write_dataset(&cfg.out, &cfg.spec, cfg.count, cfg.label)?;
    let phi = m.items.iter().map(|i| i.volume_fraction).sum::<f64>() / m.items.len() as f64;
    Ok(GenerateReport {
        out: cfg.out.clone(),
        count: m.items.len(),
        mean_volume_fraction: phi,
    })
}

// ------------------------------------------------------------------- train

/// Network settings; the input shape and class count come from the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSettings {
    pub base_channels: usize,
    pub channel_mults: Vec<usize>,
    pub res_blocks: usize,
    pub embed_dim: usize,
    pub norm_groups: usize,
    /// Parameter initialization seed.
    pub seed: u64,
}

impl Default for ModelSettings {
    fn default() -> Self {
        let a = Architecture::default();
        Self {
            base_channels: a.base_channels,
            channel_mults: a.channel_mults,
            res_blocks: a.res_blocks,
            embed_dim: a.embed_dim,
            norm_groups: a.norm_groups,
            seed: 0,
        }
    }
}

impl ModelSettings {
    pub fn architecture(&self, shape: &[usize], num_classes: usize) -> Architecture {
        Architecture {
            shape: shape.to_vec(),
            base_channels: self.base_channels,
            channel_mults: self.channel_mults.clone(),
            res_blocks: self.res_blocks,
            embed_dim: self.embed_dim,
            num_classes,
            norm_groups: self.norm_groups,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub data: Vec<PathBuf>,
    pub schedule: ScheduleConfig,
    pub model: ModelSettings,
    pub training: TrainSettings,
    /// When set, overrides `training.steps` with whole passes over the data.
    pub epochs: Option<usize>,
    pub checkpoint_out: PathBuf,
    pub loss_csv: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            data: Vec::new(),
            schedule: ScheduleConfig::default(),
            model: ModelSettings::default(),
            training: TrainSettings::default(),
            epochs: None,
            checkpoint_out: PathBuf::from("model.ckpt"),
            loss_csv: None,
        }
    }
}

#[derive(Debug, Serialize)]
pub struct TrainReport {
    pub checkpoint: PathBuf,
    pub steps: usize,
    pub param_count: usize,
    pub initial_loss: Option<f64>,
    pub final_loss: Option<f64>,
}

/// Mean of the last `min(100, len)` losses.
pub fn tail_loss(losses: &[f64]) -> Option<f64> {
    let k = losses.len().min(100);
    (k > 0).then(|| losses[losses.len() - k..].iter().sum::<f64>() / k as f64)
}

/// Build and train a model on already loaded images.
pub fn train_on(
    images: &[Microstructure],
    labels: Option<&[usize]>,
    schedule: &NoiseSchedule,
    model: &ModelSettings,
    training: &TrainSettings,
) -> Result<(DenoiserModel, Vec<f64>)> {
    let classes = labels.map_or(0, |l| l.iter().max().map_or(0, |m| m + 1));
    let arch = model.architecture(images[0].shape(), classes);
    let mut net = DenoiserModel::new(arch, model.seed)?;
    let fields: Vec<Field> = images.iter().map(|m| m.to_field()).collect();
    let every = (training.steps / 20).max(1);
    let losses = fit(&mut net, &fields, labels, schedule, training, |step, loss| {
        if (step + 1) % every == 0 {
            eprintln!("train step {}/{}: loss {loss:.5}", step + 1, training.steps);
        }
    })?;
    Ok((net, losses))
}

pub fn cmd_train(cfg: &TrainConfig) -> Result<TrainReport> {
    let schedule = cfg.schedule.build()?;
    let mut training = cfg.training.clone();
    training.validate()?;
    let data = load_datasets(&cfg.data)?;
    if let Some(e) = cfg.epochs {
        let per_epoch = data.images.len().div_ceil(training.batch_size.min(data.images.len()));
        training.steps = e * per_epoch;
    }
    let classes = data.labels.as_ref().map_or(0, |l| l.iter().max().map_or(0, |m| m + 1));
    cfg.model.architecture(data.images[0].shape(), classes).validate()?;

    let (model, losses) = train_on(&data.images, data.labels.as_deref(), &schedule, &cfg.model, &training)?;
    if let Some(parent) = cfg.checkpoint_out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    save_checkpoint(&cfg.checkpoint_out, &model, &cfg.schedule, cfg.model.seed, losses.len() as u64)?;
    if let Some(path) = &cfg.loss_csv {
        write_loss_csv(path, &losses)?;
    }
    Ok(TrainReport {
        checkpoint: cfg.checkpoint_out.clone(),
        steps: losses.len(),
        param_count: model.param_count(),
        initial_loss: losses.first().copied(),
        final_loss: tail_loss(&losses),
    })
}

fn write_loss_csv(path: &Path, losses: &[f64]) -> Result<()> {
    let steps: Vec<f64> = (1..=losses.len()).map(|s| s as f64).collect();
    write_csv(fs::File::create(path)?, &["step", "loss"], &[&steps, losses])?;
    Ok(())
}

// ------------------------------------------------------------------ sample

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerSettings {
    /// Number of reverse steps.
    pub steps: usize,
    pub spacing: StepSpacing,
    pub eta: f64,
    pub guidance: f64,
    pub seed: u64,
}

impl Default for SamplerSettings {
    fn default() -> Self {
        Self {
            steps: 50,
            spacing: StepSpacing::Uniform,
            eta: 0.0,
            guidance: 0.0,
            seed: 0,
        }
    }
}

impl SamplerSettings {
    pub fn build(&self, s: &NoiseSchedule) -> Result<SamplerConfig> {
        let cfg = SamplerConfig::spaced(self.spacing, s.steps(), self.steps, self.eta, self.seed)?
            .with_guidance(self.guidance);
        cfg.validate(s)?;
        Ok(cfg)
    }
}

pub struct LoadedModel {
    pub model: DenoiserModel,
    pub schedule: NoiseSchedule,
}

pub fn load_model(path: &Path) -> Result<LoadedModel> {
    let (header, model) =
        load_checkpoint(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    Ok(LoadedModel {
        model,
        schedule: header.schedule.build()?,
    })
}

fn check_label(model: &DenoiserModel, label: Option<usize>) -> Result<()> {
    if let Some(l) = label {
        let classes = model.architecture().num_classes;
        if l >= classes {
            return Err(invalid(format!("label {l} out of range: model has {classes} classes")));
        }
    }
    Ok(())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct SampleConfig {
    pub checkpoint: PathBuf,
    pub count: usize,
    pub sampler: SamplerSettings,
    pub label: Option<usize>,
    pub periodic: bool,
    pub out: PathBuf,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self {
            checkpoint: PathBuf::from("model.ckpt"),
            count: 8,
            sampler: SamplerSettings::default(),
            label: None,
            periodic: true,
            out: PathBuf::from("samples"),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SampleRecord {
    pub seed: u64,
    pub file: String,
    pub sha256: String,
    pub volume_fraction: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub permeability: Option<PermeabilityReport>,
}

#[derive(Debug, Serialize)]
pub struct SampleReport {
    pub tool_version: &'static str,
    pub config: SampleConfig,
    pub samples: Vec<SampleRecord>,
}

/// Seeds used for `count` samples starting at `seed`: `seed, seed + 1, ...`.
pub fn sample_seeds(seed: u64, count: usize) -> Vec<u64> {
    (0..count as u64).map(|i| seed.wrapping_add(i)).collect()
}

/// Sample and binarize one microstructure per seed.
pub fn generate_samples(
    model: &DenoiserModel,
    schedule: &NoiseSchedule,
    sampler: &SamplerConfig,
    label: Option<usize>,
    seeds: &[u64],
    periodic: bool,
) -> Result<Vec<Microstructure>> {
    let shape = model.architecture().shape.clone();
    sample_many(model, sampler, label, &shape, schedule, seeds)?
        .iter()
        .map(|f| Ok(Microstructure::from_field(f, periodic)?))
        .collect()
}

fn write_samples(dir: &Path, prefix: &str, seeds: &[u64], images: &[Microstructure]) -> Result<Vec<SampleRecord>> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    images
        .iter()
        .zip(seeds)
        .enumerate()
        .map(|(i, (ms, &seed))| {
            let file = image_name(prefix, i, ms.dims());
            write_microstructure(&dir.join(&file), ms)?;
            Ok(SampleRecord {
                seed,
                file,
                sha256: sample_hash(ms),
                volume_fraction: ms.volume_fraction(),
                permeability: None,
            })
        })
        .collect()
}

pub fn cmd_sample(cfg: &SampleConfig) -> Result<SampleReport> {
    let lm = load_model(&cfg.checkpoint)?;
    let sampler = cfg.sampler.build(&lm.schedule)?;
    check_label(&lm.model, cfg.label)?;
    let seeds = sample_seeds(cfg.sampler.seed, cfg.count);
    let images = generate_samples(&lm.model, &lm.schedule, &sampler, cfg.label, &seeds, cfg.periodic)?;
    let samples = write_samples(&cfg.out, "sample", &seeds, &images)?;
    let report = SampleReport {
        tool_version: TOOL_VERSION,
        config: cfg.clone(),
        samples,
    };
    write_json(&cfg.out.join("samples.json"), &report)?;
    Ok(report)
}

// ------------------------------------------------------------- interpolate

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct InterpolateConfig {
    pub checkpoint: PathBuf,
    pub seed0: u64,
    pub seed1: u64,
    pub frames: usize,
    pub steps: usize,
    pub spacing: StepSpacing,
    pub guidance: f64,
    pub label: Option<usize>,
    pub periodic: bool,
    pub r_max: usize,
    pub out: PathBuf,
}

impl Default for InterpolateConfig {
    fn default() -> Self {
        Self {
            checkpoint: PathBuf::from("model.ckpt"),
            seed0: 0,
            seed1: 1,
            frames: 8,
            steps: 50,
            spacing: StepSpacing::Uniform,
            guidance: 0.0,
            label: None,
            periodic: true,
            r_max: 10,
            out: PathBuf::from("interpolation"),
        }
    }
}

#[derive(Debug, Serialize)]
pub struct InterpolateReport {
    pub tool_version: &'static str,
    pub config: InterpolateConfig,
    pub frames: Vec<SampleRecord>,
    pub strip: String,
    /// Largest |S2 difference| between consecutive frames.
    pub max_adjacent_s2_change: f64,
    /// Largest |S2 difference| between the two endpoint frames.
    pub endpoint_s2_change: f64,
}

/// Deterministic (`eta = 0`) decodes of slerped latents at
/// `alpha = k / (frames - 1)`.
#[allow(clippy::too_many_arguments)]
pub fn interpolation_frames(
    model: &DenoiserModel,
    schedule: &NoiseSchedule,
    steps: usize,
    spacing: StepSpacing,
    guidance: f64,
    label: Option<usize>,
    seeds: (u64, u64),
    frames: usize,
    periodic: bool,
) -> Result<Vec<Microstructure>> {
    if frames < 2 {
        return Err(invalid("interpolation needs at least 2 frames"));
    }
    let shape = model.architecture().shape.clone();
    let cfg = SamplerConfig::spaced(spacing, schedule.steps(), steps, 0.0, seeds.0)?.with_guidance(guidance);
    cfg.validate(schedule)?;
    let z0 = initial_latent(&shape, seeds.0)?;
    let z1 = initial_latent(&shape, seeds.1)?;
    let alphas: Vec<f64> = (0..frames).map(|k| k as f64 / (frames - 1) as f64).collect();
    microdiff::par::map_slice(&alphas, |&a| -> Result<Microstructure> {
        let z = slerp(&z0, &z1, a)?;
        // The noise stream is unused at eta = 0.
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let x = denoise_latent(model, &cfg, label, z, &mut rng, schedule)?;
        Ok(Microstructure::from_field(&x, periodic)?)
    })
    .into_iter()
    .collect()
}

fn max_abs_diff(a: &DescriptorCurve, b: &DescriptorCurve) -> f64 {
    a.value
        .iter()
        .zip(&b.value)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

pub fn cmd_interpolate(cfg: &InterpolateConfig) -> Result<InterpolateReport> {
    let lm = load_model(&cfg.checkpoint)?;
    check_label(&lm.model, cfg.label)?;
    let min_extent = *lm.model.architecture().shape.iter().min().unwrap_or(&1);
    if cfg.r_max >= min_extent {
        return Err(invalid(format!("r_max {} must be below the image extent {min_extent}", cfg.r_max)));
    }
    let frames = interpolation_frames(
        &lm.model,
        &lm.schedule,
        cfg.steps,
        cfg.spacing,
        cfg.guidance,
        cfg.label,
        (cfg.seed0, cfg.seed1),
        cfg.frames,
        cfg.periodic,
    )?;
    let curves: Vec<DescriptorCurve> = frames
        .iter()
        .map(|f| two_point_correlation(f, cfg.r_max))
        .collect::<microdiff::Result<_>>()?;
    let max_adjacent = curves
        .windows(2)
        .map(|w| max_abs_diff(&w[0], &w[1]))
        .fold(0.0, f64::max);
    let endpoint = max_abs_diff(&curves[0], &curves[curves.len() - 1]);

    let seeds: Vec<u64> = vec![cfg.seed0; frames.len()];
    let mut records = write_samples(&cfg.out, "frame", &seeds, &frames)?;
    if let Some(last) = records.last_mut() {
        last.seed = cfg.seed1;
    }
    let strip = stitch(&frames)?;
    let strip_name = image_name("strip", 0, strip.dims()).replace("_00000", "");
    write_microstructure(&cfg.out.join(&strip_name), &strip)?;
    let report = InterpolateReport {
        tool_version: TOOL_VERSION,
        config: cfg.clone(),
        frames: records,
        strip: strip_name,
        max_adjacent_s2_change: max_adjacent,
        endpoint_s2_change: endpoint,
    };
    write_json(&cfg.out.join("interpolation.json"), &report)?;
    Ok(report)
}

// ---------------------------------------------------------------- eta sweep

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct EtaSweepConfig {
    pub checkpoint: PathBuf,
    pub seed: u64,
    /// Number of consecutive seeds averaged (`seed, seed + 1, ...`).
    pub seeds: usize,
    pub etas: Vec<f64>,
    pub steps: usize,
    pub spacing: StepSpacing,
    pub guidance: f64,
    pub label: Option<usize>,
    pub periodic: bool,
    pub out: PathBuf,
}

impl Default for EtaSweepConfig {
    fn default() -> Self {
        Self {
            checkpoint: PathBuf::from("model.ckpt"),
            seed: 0,
            seeds: 1,
            etas: vec![0.0, 0.2, 0.4, 0.6, 0.8, 1.0],
            steps: 50,
            spacing: StepSpacing::Uniform,
            guidance: 0.0,
            label: None,
            periodic: true,
            out: PathBuf::from("eta_sweep"),
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct EtaEntry {
    pub eta: f64,
    pub file: String,
    /// Fraction of cells differing from the eta = 0 sample, per seed.
    pub hamming: Vec<f64>,
    pub mean_hamming: f64,
}

#[derive(Debug, Serialize)]
pub struct EtaSweepReport {
    pub tool_version: &'static str,
    pub config: EtaSweepConfig,
    pub entries: Vec<EtaEntry>,
}

/// Mean Hamming distance from the eta = 0 sample for each eta, plus the
/// first seed's image per eta.
#[allow(clippy::too_many_arguments)]
pub fn eta_sweep(
    model: &DenoiserModel,
    schedule: &NoiseSchedule,
    etas: &[f64],
    seeds: &[u64],
    steps: usize,
    spacing: StepSpacing,
    guidance: f64,
    label: Option<usize>,
    periodic: bool,
) -> Result<Vec<(Vec<f64>, Microstructure)>> {
    if let Some(e) = etas.iter().find(|e| !(0.0..=1.0).contains(*e)) {
        return Err(invalid(format!("eta {e} outside [0, 1]")));
    }
    if seeds.is_empty() {
        return Err(invalid("eta sweep needs at least one seed"));
    }
    let base = SamplerConfig::spaced(spacing, schedule.steps(), steps, 0.0, 0)?.with_guidance(guidance);
    base.validate(schedule)?;
    let reference = generate_samples(model, schedule, &base, label, seeds, periodic)?;
    etas.iter()
        .map(|&eta| {
            let cfg = base.clone().with_eta(eta);
            let imgs = if eta == 0.0 {
                reference.clone()
            } else {
                generate_samples(model, schedule, &cfg, label, seeds, periodic)?
            };
            let hamming = imgs
                .iter()
                .zip(&reference)
                .map(|(a, b)| a.hamming_fraction(b))
                .collect::<microdiff::Result<Vec<f64>>>()?;
            Ok((hamming, imgs[0].clone()))
        })
        .collect()
}

pub fn cmd_eta_sweep(cfg: &EtaSweepConfig) -> Result<EtaSweepReport> {
    let lm = load_model(&cfg.checkpoint)?;
    check_label(&lm.model, cfg.label)?;
    let seeds = sample_seeds(cfg.seed, cfg.seeds);
    let results = eta_sweep(
        &lm.model,
        &lm.schedule,
        &cfg.etas,
        &seeds,
        cfg.steps,
        cfg.spacing,
        cfg.guidance,
        cfg.label,
        cfg.periodic,
    )?;
    fs::create_dir_all(&cfg.out)?;
    let mut entries = Vec::new();
    for (k, (&eta, (hamming, img))) in cfg.etas.iter().zip(results).enumerate() {
        let file = image_name("eta", k, img.dims());
        write_microstructure(&cfg.out.join(&file), &img)?;
        let mean_hamming = hamming.iter().sum::<f64>() / hamming.len() as f64;
        entries.push(EtaEntry {
            eta,
            file,
            hamming,
            mean_hamming,
        });
    }
    let report = EtaSweepReport {
        tool_version: TOOL_VERSION,
        config: cfg.clone(),
        entries,
    };
    write_json(&cfg.out.join("eta_sweep.json"), &report)?;
    Ok(report)
}

// -------------------------------------------------------------- descriptors

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum S2Method {
    #[default]
    Brute,
    Fft,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct DescriptorsConfig {
    /// Image files or directories of images.
    pub inputs: Vec<PathBuf>,
    /// Optional reference population for gap statistics.
    pub reference: Vec<PathBuf>,
    pub r_max: usize,
    pub periodic: bool,
    pub method: S2Method,
    pub out: PathBuf,
}

impl Default for DescriptorsConfig {
    fn default() -> Self {
        Self {
            inputs: Vec::new(),
            reference: Vec::new(),
            r_max: 10,
            periodic: true,
            method: S2Method::Brute,
            out: PathBuf::from("descriptors.csv"),
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct PopulationDescriptors {
    pub count: usize,
    pub volume_fraction: f64,
    pub s2: DescriptorCurve,
    pub lineal_path: DescriptorCurve,
}

#[derive(Debug, Serialize)]
pub struct DescriptorsReport {
    pub tool_version: &'static str,
    pub population: PopulationDescriptors,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reference: Option<PopulationDescriptors>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub s2_gap: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lineal_gap: Option<f64>,
}

fn is_image(p: &Path) -> bool {
    match p.extension().and_then(|e| e.to_str()) {
        Some("pgm") => true,
        Some("raw") => p.with_extension("json").exists(),
        _ => false,
    }
}

/// Expand directories into their (sorted) image files.
pub fn collect_images(inputs: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in inputs {
        if p.is_dir() {
            let mut files: Vec<PathBuf> = fs::read_dir(p)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| is_image(f))
                .collect();
            files.sort();
            out.extend(files);
        } else if p.exists() {
            out.push(p.clone());
        } else {
            return Err(invalid(format!("input {} does not exist", p.display())));
        }
    }
    if out.is_empty() {
        return Err(invalid("no input images found"));
    }
    Ok(out)
}

/// Average volume fraction, S2 and lineal path of a population.
pub fn population_descriptors(
    images: &[Microstructure],
    r_max: usize,
    method: S2Method,
) -> Result<PopulationDescriptors> {
    if images.is_empty() {
        return Err(invalid("empty population"));
    }
    let s2 = microdiff::par::map_slice(images, |m| match method {
        S2Method::Brute => two_point_correlation(m, r_max),
        S2Method::Fft => s2_fft(m, r_max),
    })
    .into_iter()
    .collect::<microdiff::Result<Vec<_>>>()?;
    let lp = microdiff::par::map_slice(images, |m| lineal_path(m, r_max))
        .into_iter()
        .collect::<microdiff::Result<Vec<_>>>()?;
    Ok(PopulationDescriptors {
        count: images.len(),
        volume_fraction: images.iter().map(|m| m.volume_fraction()).sum::<f64>() / images.len() as f64,
        s2: DescriptorCurve::average(&s2)?,
        lineal_path: DescriptorCurve::average(&lp)?,
    })
}

fn read_all(paths: &[PathBuf], periodic: bool) -> Result<Vec<Microstructure>> {
    paths
        .iter()
        .map(|p| read_microstructure(p, periodic).with_context(|| format!("reading {}", p.display())))
        .collect()
}

pub fn cmd_descriptors(cfg: &DescriptorsConfig) -> Result<DescriptorsReport> {
    if cfg.method == S2Method::Fft && !cfg.periodic {
        return Err(invalid("the FFT method requires periodic images"));
    }
    let images = read_all(&collect_images(&cfg.inputs)?, cfg.periodic)?;
    let population = population_descriptors(&images, cfg.r_max, cfg.method)?;
    let reference = if cfg.reference.is_empty() {
        None
    } else {
        let refs = read_all(&collect_images(&cfg.reference)?, cfg.periodic)?;
        Some(population_descriptors(&refs, cfg.r_max, cfg.method)?)
    };
    let r: Vec<f64> = population.s2.r.iter().map(|&r| r as f64).collect();
    write_csv(
        fs::File::create(&cfg.out).with_context(|| format!("creating {}", cfg.out.display()))?,
        &["r", "s2", "lineal_path"],
        &[&r, &population.s2.value, &population.lineal_path.value],
    )?;
    let (s2_gap, lineal_gap) = match &reference {
        Some(rf) => (
            Some(population.s2.mean_abs_diff(&rf.s2, cfg.r_max)),
            Some(population.lineal_path.mean_abs_diff(&rf.lineal_path, cfg.r_max)),
        ),
        None => (None, None),
    };
    Ok(DescriptorsReport {
        tool_version: TOOL_VERSION,
        population,
        reference,
        s2_gap,
        lineal_gap,
    })
}

// ------------------------------------------------------------------ fourier

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct FourierConfig {
    pub inputs: Vec<PathBuf>,
    /// Long-format CSV: contour, harmonic, magnitude.
    pub out: PathBuf,
}

impl Default for FourierConfig {
    fn default() -> Self {
        Self {
            inputs: Vec::new(),
            out: PathBuf::from("fourier.csv"),
        }
    }
}

#[derive(Debug, Serialize)]
pub struct FourierReport {
    pub tool_version: &'static str,
    pub images: usize,
    pub contours: usize,
    pub fit: Option<SkewNormalFit>,
}

pub fn cmd_fourier(cfg: &FourierConfig) -> Result<FourierReport> {
    let paths = collect_images(&cfg.inputs)?;
    let images = read_all(&paths, false)?;
    if let Some(m) = images.iter().find(|m| m.dims() != 2) {
        return Err(invalid(format!("contour tracing needs 2D images, got {:?}", m.shape())));
    }
    let mut descs: Vec<FourierDescriptor> = Vec::new();
    for m in &images {
        for c in trace_boundaries(m)? {
            descs.push(fourier_descriptor(&c));
        }
    }
    let (mut ci, mut hk, mut mag) = (Vec::new(), Vec::new(), Vec::new());
    for (i, d) in descs.iter().enumerate() {
        for (k, v) in d.harmonic_magnitudes().into_iter().enumerate() {
            ci.push(i as f64);
            hk.push((k + 1) as f64);
            mag.push(v);
        }
    }
    write_csv(
        fs::File::create(&cfg.out).with_context(|| format!("creating {}", cfg.out.display()))?,
        &["contour", "harmonic", "magnitude"],
        &[&ci, &hk, &mag],
    )?;
    let fit = if descs.is_empty() {
        None
    } else {
        Some(descriptor_population_stats(&descs)?)
    };
    Ok(FourierReport {
        tool_version: TOOL_VERSION,
        images: images.len(),
        contours: descs.len(),
        fit,
    })
}

// ------------------------------------------------------------ permeability

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PermeabilitySettings {
    /// Phase value treated as solid.
    pub solid_phase: u8,
    pub lbm: LbmConfig,
    pub tol: f64,
    pub max_steps: usize,
}

impl Default for PermeabilitySettings {
    fn default() -> Self {
        Self {
            solid_phase: 1,
            lbm: LbmConfig::default(),
            tol: 1e-6,
            max_steps: 50_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PermeabilityReport {
    pub kappa: f64,
    pub class: usize,
    pub steps: usize,
    pub converged: bool,
    pub mean_velocity: f64,
}

/// Run the flow solver to steady state and classify the permeability.
pub fn permeability_of(
    ms: &Microstructure,
    settings: &PermeabilitySettings,
) -> Result<(PermeabilityReport, LbmState)> {
    if !(settings.tol > 0.0) {
        return Err(invalid("tolerance must be positive"));
    }
    let mut st = LbmState::from_microstructure(ms, settings.solid_phase, settings.lbm.clone())?;
    let steady = st.run_to_steady(settings.tol, settings.max_steps)?;
    let kappa = darcy_permeability(&st)?.max(0.0);
    let class = classify_permeability(kappa)?.index;
    Ok((
        PermeabilityReport {
            kappa,
            class,
            steps: steady.steps,
            converged: steady.converged,
            mean_velocity: steady.mean_velocity,
        },
        st,
    ))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct PermeabilityConfig {
    pub input: PathBuf,
    pub periodic: bool,
    pub settings: PermeabilitySettings,
    pub out: PathBuf,
    pub velocity_out: Option<PathBuf>,
}

impl Default for PermeabilityConfig {
    fn default() -> Self {
        Self {
            input: PathBuf::new(),
            periodic: true,
            settings: PermeabilitySettings::default(),
            out: PathBuf::from("permeability.json"),
            velocity_out: None,
        }
    }
}

/// Writes the report even when the solver did not converge; the caller
/// turns that case into a non-convergence error.
pub fn cmd_permeability(cfg: &PermeabilityConfig) -> Result<PermeabilityReport> {
    let ms = read_microstructure(&cfg.input, cfg.periodic)
        .with_context(|| format!("reading {}", cfg.input.display()))?;
    let (report, st) = permeability_of(&ms, &cfg.settings)?;
    write_json(&cfg.out, &report)?;
    if let Some(v) = &cfg.velocity_out {
        write_float_field(v, ms.shape(), ms.dims(), &st.velocity_field())?;
    }
    Ok(report)
}

// ----------------------------------------------------------------- pipeline

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetSettings {
    /// One generator spec per class; more than one trains a conditional model.
    pub classes: Vec<GenSpec>,
    pub count_per_class: usize,
}

impl Default for DatasetSettings {
    fn default() -> Self {
        Self {
            classes: vec![GenSpec {
                kind: GeneratorKind::Inclusions,
                shape: vec![32, 32],
                target_fraction: 0.3,
                radius_min: 3.0,
                radius_max: 4.0,
                ..GenSpec::default()
            }],
            count_per_class: 500,
        }
    }
}

/// Everything the end-to-end pipeline needs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub schedule: ScheduleConfig,
    pub model: ModelSettings,
    pub training: TrainSettings,
    pub dataset: DatasetSettings,
    pub sampler: SamplerSettings,
    pub samples_per_class: usize,
    pub r_max: usize,
    pub permeability: Option<PermeabilitySettings>,
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schedule: ScheduleConfig::default(),
            model: ModelSettings::default(),
            training: TrainSettings::default(),
            dataset: DatasetSettings::default(),
            sampler: SamplerSettings::default(),
            samples_per_class: 16,
            r_max: 10,
            permeability: None,
            out: PathBuf::from("run"),
        }
    }
}

impl RunConfig {
    /// Check every stage's preconditions up front.
    pub fn validate(&self) -> Result<NoiseSchedule> {
        let schedule = self.schedule.build()?;
        self.sampler.build(&schedule)?;
        self.training.validate()?;
        if self.dataset.classes.is_empty() || self.dataset.count_per_class == 0 {
            return Err(invalid("pipeline needs at least one class with a positive count"));
        }
        let shape = &self.dataset.classes[0].shape;
        for spec in &self.dataset.classes {
            spec.validate()?;
            if &spec.shape != shape {
                return Err(invalid("all dataset classes must share one shape"));
            }
        }
        let classes = if self.dataset.classes.len() > 1 { self.dataset.classes.len() } else { 0 };
        self.model.architecture(shape, classes).validate()?;
        if self.r_max >= *shape.iter().min().unwrap_or(&0) {
            return Err(invalid(format!("r_max {} must be below every extent of {shape:?}", self.r_max)));
        }
        if let Some(p) = &self.permeability {
            if p.solid_phase > 1 || !(p.tol > 0.0) || !(p.lbm.tau > 0.5) || p.lbm.axis >= shape.len() {
                return Err(invalid("invalid permeability settings"));
            }
        }
        Ok(schedule)
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct TrainingMetrics {
    pub steps: usize,
    pub initial_loss: Option<f64>,
    pub final_loss: Option<f64>,
    /// `(step, mean loss over the preceding block)` at up to 50 points.
    pub loss_curve: Vec<(usize, f64)>,
}

#[derive(Clone, Debug, Serialize)]
pub struct ClassReport {
    pub label: Option<usize>,
    pub reference_volume_fraction: f64,
    pub generated_volume_fraction: f64,
    pub baseline_volume_fraction: f64,
    /// Mean |S2_gen - S2_ref| over `0..=r_max`.
    pub s2_gap: f64,
    pub lineal_gap: f64,
    /// Same gaps for the untrained model on the same seeds.
    pub baseline_s2_gap: f64,
    pub baseline_lineal_gap: f64,
    pub samples: Vec<SampleRecord>,
}

#[derive(Debug, Serialize)]
pub struct PipelineReport {
    pub tool_version: &'static str,
    pub config: RunConfig,
    pub config_hash: String,
    pub training: TrainingMetrics,
    pub classes: Vec<ClassReport>,
}

fn loss_curve(losses: &[f64]) -> Vec<(usize, f64)> {
    let block = losses.len().div_ceil(50).max(1);
    losses
        .chunks(block)
        .enumerate()
        .map(|(i, c)| ((i * block + c.len()), c.iter().sum::<f64>() / c.len() as f64))
        .collect()
}

pub fn cmd_pipeline(cfg: &RunConfig) -> Result<PipelineReport> {
    let schedule = cfg.validate()?;
    let config_hash = config_hash(cfg)?;
    let conditional = cfg.dataset.classes.len() > 1;

    let mut images = Vec::new();
    let mut labels = Vec::new();
    let mut per_class: Vec<std::ops::Range<usize>> = Vec::new();
    for (k, spec) in cfg.dataset.classes.iter().enumerate() {
        let dir = cfg.out.join("data").join(format!("class_{k}"));
        let label = conditional.then_some(k);
        write_dataset(&dir, spec, cfg.dataset.count_per_class, label).context("stage generate")?;
        let loaded = load_datasets(&[dir]).context("stage generate")?;
        let start = images.len();
        images.extend(loaded.images);
        labels.extend(std::iter::repeat_n(k, images.len() - start));
        per_class.push(start..images.len());
    }

    let label_slice = conditional.then_some(labels.as_slice());
    let (model, losses) =
        train_on(&images, label_slice, &schedule, &cfg.model, &cfg.training).context("stage train")?;
    let ckpt = cfg.out.join("model.ckpt");
    save_checkpoint(&ckpt, &model, &cfg.schedule, cfg.model.seed, losses.len() as u64)
        .context("stage train")?;
    write_loss_csv(&cfg.out.join("losses.csv"), &losses).context("stage train")?;
    let training = TrainingMetrics {
        steps: losses.len(),
        initial_loss: losses.first().copied(),
        final_loss: tail_loss(&losses),
        loss_curve: loss_curve(&losses),
    };

    let mut classes = Vec::new();
    if cfg.samples_per_class > 0 {
        // Sample from the checkpoint so `sample` reproduces these images.
        let trained = load_model(&ckpt).context("stage sample")?;
        let mut baseline = DenoiserModel::new(model.architecture().clone(), cfg.model.seed)?;
        baseline.round_to_f32();
        let sampler = cfg.sampler.build(&schedule)?;
        let seeds = sample_seeds(cfg.sampler.seed, cfg.samples_per_class);
        for (k, spec) in cfg.dataset.classes.iter().enumerate() {
            let label = conditional.then_some(k);
            let gen = generate_samples(&trained.model, &schedule, &sampler, label, &seeds, spec.periodic)
                .context("stage sample")?;
            let base = generate_samples(&baseline, &schedule, &sampler, label, &seeds, spec.periodic)
                .context("stage sample")?;
            let dir = cfg.out.join("samples").join(format!("class_{k}"));
            let mut records = write_samples(&dir, "sample", &seeds, &gen).context("stage sample")?;

            let reference = &images[per_class[k].clone()];
            let d_ref = population_descriptors(reference, cfg.r_max, S2Method::Brute).context("stage descriptors")?;
            let d_gen = population_descriptors(&gen, cfg.r_max, S2Method::Brute).context("stage descriptors")?;
            let d_base = population_descriptors(&base, cfg.r_max, S2Method::Brute).context("stage descriptors")?;

            if let Some(p) = &cfg.permeability {
                for (rec, ms) in records.iter_mut().zip(&gen) {
                    let (rep, _) = permeability_of(ms, p).context("stage permeability")?;
                    rec.permeability = Some(rep);
                }
            }
            classes.push(ClassReport {
                label,
                reference_volume_fraction: d_ref.volume_fraction,
                generated_volume_fraction: d_gen.volume_fraction,
                baseline_volume_fraction: d_base.volume_fraction,
                s2_gap: d_gen.s2.mean_abs_diff(&d_ref.s2, cfg.r_max),
                lineal_gap: d_gen.lineal_path.mean_abs_diff(&d_ref.lineal_path, cfg.r_max),
                baseline_s2_gap: d_base.s2.mean_abs_diff(&d_ref.s2, cfg.r_max),
                baseline_lineal_gap: d_base.lineal_path.mean_abs_diff(&d_ref.lineal_path, cfg.r_max),
                samples: records,
            });
        }
    }
    let report = PipelineReport {
        tool_version: TOOL_VERSION,
        config: cfg.clone(),
        config_hash,
        training,
        classes,
    };
    write_json(&cfg.out.join("report.json"), &report)?;
    Ok(report)
}
