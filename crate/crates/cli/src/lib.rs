//! Command-line front end: argument parsing, config resolution and the
//! mapping from errors to exit codes.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod commands;
pub mod config;
pub mod dataset;

use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use microdiff::denoiser::OptimizerKind;
use microdiff::diffusion::StepSpacing;
use microdiff::synth::GeneratorKind;
use serde::Serialize;

use commands::*;
use config::resolve;

/// Environment variable holding the worker-thread count.
pub const WORKERS_ENV: &str = "MICRODIFF_WORKERS";

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_DIVERGENCE: i32 = 3;
pub const EXIT_NON_CONVERGENCE: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "microdiff", version, about = "Microstructure synthesis with denoising diffusion models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic training dataset.
    GenerateDataset(GenerateArgs),
    /// Train a noise-prediction model on one or more datasets.
    Train(TrainArgs),
    /// Draw samples from a checkpoint.
    Sample(SampleArgs),
    /// Decode a spherical interpolation between two latent seeds.
    Interpolate(InterpolateArgs),
    /// Sample one latent at several DDIM eta values.
    EtaSweep(EtaSweepArgs),
    /// Volume fraction, two-point correlation and lineal path of images.
    Descriptors(DescriptorsArgs),
    /// Contour Fourier descriptors and their skew-normal summary.
    Fourier(FourierArgs),
    /// Lattice-Boltzmann permeability of one image or volume.
    Permeability(PermeabilityArgs),
    /// generate -> train -> sample -> descriptors (-> permeability).
    Pipeline(PipelineArgs),
}

#[derive(Debug, Args)]
pub struct ConfigArg {
    /// JSON file merged over the flags (its values win).
    #[arg(long, global = false)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[command(flatten)]
    pub cfg: ConfigArg,
    #[arg(long)]
    pub kind: Option<GeneratorKind>,
    /// Comma-separated extents, e.g. 64,64 or 32,32,32.
    #[arg(long, value_delimiter = ',')]
    pub shape: Option<Vec<usize>>,
    #[arg(long)]
    pub fraction: Option<f64>,
    #[arg(long)]
    pub count: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub radius_min: Option<f64>,
    #[arg(long)]
    pub radius_max: Option<f64>,
    /// Class label recorded in the manifest.
    #[arg(long)]
    pub label: Option<usize>,
    #[arg(long)]
    pub non_periodic: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub cfg: ConfigArg,
    /// Dataset directory (repeatable).
    #[arg(long)]
    pub data: Vec<PathBuf>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub label_dropout: Option<f64>,
    #[arg(long, value_parser = parse_optimizer)]
    pub optimizer: Option<OptimizerKind>,
    #[arg(long)]
    pub base_channels: Option<usize>,
    #[arg(long)]
    pub res_blocks: Option<usize>,
    /// Diffusion length T.
    #[arg(long)]
    pub timesteps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub checkpoint_out: Option<PathBuf>,
    #[arg(long)]
    pub loss_csv: Option<PathBuf>,
}

fn parse_optimizer(s: &str) -> Result<OptimizerKind, String> {
    match s {
        "sgd" => Ok(OptimizerKind::Sgd),
        "adam" => Ok(OptimizerKind::Adam),
        _ => Err(format!("unknown optimizer {s:?} (expected sgd or adam)")),
    }
}

#[derive(Debug, Args)]
pub struct SamplerArgs {
    /// Number of reverse steps.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Step spacing: uniform or quadratic (dense near t = 1).
    #[arg(long)]
    pub spacing: Option<StepSpacing>,
    #[arg(long)]
    pub guidance: Option<f64>,
    #[arg(long)]
    pub label: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[command(flatten)]
    pub cfg: ConfigArg,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub count: Option<usize>,
    #[arg(long)]
    pub eta: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub sampler: SamplerArgs,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InterpolateArgs {
    #[command(flatten)]
    pub cfg: ConfigArg,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub seed0: Option<u64>,
    #[arg(long)]
    pub seed1: Option<u64>,
    #[arg(long)]
    pub frames: Option<usize>,
    #[command(flatten)]
    pub sampler: SamplerArgs,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EtaSweepArgs {
    #[command(flatten)]
    pub cfg: ConfigArg,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Number of consecutive seeds to average over.
    #[arg(long)]
    pub seeds: Option<usize>,
    /// Comma-separated eta values.
    #[arg(long, value_delimiter = ',')]
    pub etas: Option<Vec<f64>>,
    #[command(flatten)]
    pub sampler: SamplerArgs,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DescriptorsArgs {
    #[command(flatten)]
    pub cfg: ConfigArg,
    /// Image files or directories.
    pub inputs: Vec<PathBuf>,
    /// Reference images or directories for gap statistics (repeatable).
    #[arg(long)]
    pub reference: Vec<PathBuf>,
    #[arg(long)]
    pub r_max: Option<usize>,
    #[arg(long)]
    pub non_periodic: bool,
    #[arg(long, value_enum)]
    pub method: Option<S2Method>,
    /// Output CSV.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FourierArgs {
    #[command(flatten)]
    pub cfg: ConfigArg,
    /// 2D image files or directories.
    pub inputs: Vec<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PermeabilityArgs {
    #[command(flatten)]
    pub cfg: ConfigArg,
    pub input: Option<PathBuf>,
    /// Phase value (0 or 1) treated as solid.
    #[arg(long)]
    pub solid_phase: Option<u8>,
    #[arg(long)]
    pub axis: Option<usize>,
    #[arg(long)]
    pub drive: Option<f64>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub tol: Option<f64>,
    #[arg(long)]
    pub max_steps: Option<usize>,
    #[arg(long)]
    pub non_periodic: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Optional raw f32 velocity dump (with JSON sidecar).
    #[arg(long)]
    pub velocity_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PipelineArgs {
    #[command(flatten)]
    pub cfg: ConfigArg,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub train_steps: Option<usize>,
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

fn apply_sampler(s: &mut SamplerSettings, label: &mut Option<usize>, a: SamplerArgs) {
    set(&mut s.steps, a.steps);
    set(&mut s.spacing, a.spacing);
    set(&mut s.guidance, a.guidance);
    if a.label.is_some() {
        *label = a.label;
    }
}

impl GenerateArgs {
    pub fn resolve(self) -> Result<GenerateConfig> {
        let mut c = GenerateConfig::default();
        set(&mut c.spec.kind, self.kind);
        set(&mut c.spec.shape, self.shape);
        set(&mut c.spec.target_fraction, self.fraction);
        set(&mut c.spec.seed, self.seed);
        set(&mut c.spec.radius_min, self.radius_min);
        set(&mut c.spec.radius_max, self.radius_max);
        if self.non_periodic {
            c.spec.periodic = false;
        }
        set(&mut c.count, self.count);
        c.label = self.label.or(c.label);
        set(&mut c.out, self.out);
        resolve(c, self.cfg.config.as_deref())
    }
}

impl TrainArgs {
    pub fn resolve(self) -> Result<TrainConfig> {
        let mut c = TrainConfig::default();
        if !self.data.is_empty() {
            c.data = self.data;
        }
        set(&mut c.training.steps, self.steps);
        c.epochs = self.epochs.or(c.epochs);
        set(&mut c.training.batch_size, self.batch_size);
        set(&mut c.training.lr, self.lr);
        set(&mut c.training.label_dropout, self.label_dropout);
        set(&mut c.training.optimizer.kind, self.optimizer);
        set(&mut c.model.base_channels, self.base_channels);
        set(&mut c.model.res_blocks, self.res_blocks);
        set(&mut c.schedule.steps, self.timesteps);
        if let Some(s) = self.seed {
            c.training.seed = s;
            c.model.seed = s;
        }
        set(&mut c.checkpoint_out, self.checkpoint_out);
        c.loss_csv = self.loss_csv.or(c.loss_csv);
        resolve(c, self.cfg.config.as_deref())
    }
}

impl SampleArgs {
    pub fn resolve(self) -> Result<SampleConfig> {
        let mut c = SampleConfig::default();
        set(&mut c.checkpoint, self.checkpoint);
        set(&mut c.count, self.count);
        set(&mut c.sampler.eta, self.eta);
        set(&mut c.sampler.seed, self.seed);
        apply_sampler(&mut c.sampler, &mut c.label, self.sampler);
        set(&mut c.out, self.out);
        resolve(c, self.cfg.config.as_deref())
    }
}

impl InterpolateArgs {
    pub fn resolve(self) -> Result<InterpolateConfig> {
        let mut c = InterpolateConfig::default();
        set(&mut c.checkpoint, self.checkpoint);
        set(&mut c.seed0, self.seed0);
        set(&mut c.seed1, self.seed1);
        set(&mut c.frames, self.frames);
        set(&mut c.steps, self.sampler.steps);
        set(&mut c.spacing, self.sampler.spacing);
        set(&mut c.guidance, self.sampler.guidance);
        c.label = self.sampler.label.or(c.label);
        set(&mut c.out, self.out);
        resolve(c, self.cfg.config.as_deref())
    }
}

impl EtaSweepArgs {
    pub fn resolve(self) -> Result<EtaSweepConfig> {
        let mut c = EtaSweepConfig::default();
        set(&mut c.checkpoint, self.checkpoint);
        set(&mut c.seed, self.seed);
        set(&mut c.seeds, self.seeds);
        set(&mut c.etas, self.etas);
        set(&mut c.steps, self.sampler.steps);
        set(&mut c.spacing, self.sampler.spacing);
        set(&mut c.guidance, self.sampler.guidance);
        c.label = self.sampler.label.or(c.label);
        set(&mut c.out, self.out);
        resolve(c, self.cfg.config.as_deref())
    }
}

impl DescriptorsArgs {
    pub fn resolve(self) -> Result<DescriptorsConfig> {
        let mut c = DescriptorsConfig::default();
        if !self.inputs.is_empty() {
            c.inputs = self.inputs;
        }
        if !self.reference.is_empty() {
            c.reference = self.reference;
        }
        set(&mut c.r_max, self.r_max);
        if self.non_periodic {
            c.periodic = false;
        }
        set(&mut c.method, self.method);
        set(&mut c.out, self.out);
        resolve(c, self.cfg.config.as_deref())
    }
}

impl FourierArgs {
    pub fn resolve(self) -> Result<FourierConfig> {
        let mut c = FourierConfig::default();
        if !self.inputs.is_empty() {
            c.inputs = self.inputs;
        }
        set(&mut c.out, self.out);
        resolve(c, self.cfg.config.as_deref())
    }
}

impl PermeabilityArgs {
    pub fn resolve(self) -> Result<PermeabilityConfig> {
        let mut c = PermeabilityConfig::default();
        set(&mut c.input, self.input);
        set(&mut c.settings.solid_phase, self.solid_phase);
        set(&mut c.settings.lbm.axis, self.axis);
        set(&mut c.settings.lbm.drive, self.drive);
        set(&mut c.settings.lbm.tau, self.tau);
        set(&mut c.settings.tol, self.tol);
        set(&mut c.settings.max_steps, self.max_steps);
        if self.non_periodic {
            c.periodic = false;
        }
        set(&mut c.out, self.out);
        c.velocity_out = self.velocity_out.or(c.velocity_out);
        resolve(c, self.cfg.config.as_deref())
    }
}

impl PipelineArgs {
    pub fn resolve(self) -> Result<RunConfig> {
        let mut c = RunConfig::default();
        set(&mut c.out, self.out);
        set(&mut c.training.steps, self.train_steps);
        set(&mut c.samples_per_class, self.samples);
        set(&mut c.sampler.seed, self.seed);
        resolve(c, self.cfg.config.as_deref())
    }
}

fn print_json<T: Serialize>(v: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

/// Resolve, validate and execute one subcommand, printing its report as
/// JSON on stdout.
pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenerateDataset(a) => print_json(&cmd_generate(&a.resolve()?)?),
        Command::Train(a) => print_json(&cmd_train(&a.resolve()?)?),
        Command::Sample(a) => print_json(&cmd_sample(&a.resolve()?)?),
        Command::Interpolate(a) => print_json(&cmd_interpolate(&a.resolve()?)?),
        Command::EtaSweep(a) => print_json(&cmd_eta_sweep(&a.resolve()?)?),
        Command::Descriptors(a) => print_json(&cmd_descriptors(&a.resolve()?)?),
        Command::Fourier(a) => print_json(&cmd_fourier(&a.resolve()?)?),
        Command::Permeability(a) => {
            let report = cmd_permeability(&a.resolve()?)?;
            print_json(&report)?;
            if !report.converged {
                return Err(microdiff::Error::NonConvergence {
                    steps: report.steps,
                    last_change: f64::NAN,
                }
                .into());
            }
            Ok(())
        }
        Command::Pipeline(a) => print_json(&cmd_pipeline(&a.resolve()?)?),
    }
}

/// Exit code for an error: the first library error in the chain decides.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<microdiff::Error>() {
            return match e {
                microdiff::Error::Invalid(_)
                | microdiff::Error::ShapeMismatch { .. }
                | microdiff::Error::Format(_) => EXIT_VALIDATION,
                microdiff::Error::Divergence(_) => EXIT_DIVERGENCE,
                microdiff::Error::NonConvergence { .. } => EXIT_NON_CONVERGENCE,
                microdiff::Error::Io(_) => EXIT_FAILURE,
            };
        }
        if cause.downcast_ref::<serde_json::Error>().is_some() {
            return EXIT_VALIDATION;
        }
    }
    EXIT_FAILURE
}

/// Apply the worker-count environment variable, if set.
pub fn configure_workers() -> Result<()> {
    if let Ok(v) = std::env::var(WORKERS_ENV) {
        let n: usize = v
            .trim()
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| microdiff::Error::Invalid(format!("{WORKERS_ENV} must be a positive integer, got {v:?}")))?;
        microdiff::par::set_workers(n);
    }
    Ok(())
}
