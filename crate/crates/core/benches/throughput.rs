//! Throughput of the data-parallel hot paths. Run once with the default
//! features and once with `--no-default-features` to compare the rayon and
//! sequential builds; group names carry the active mode.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use microdiff::denoiser::{train_step, Optimizer, OptimizerConfig, OptimizerKind, TrainBatch};
use microdiff::descriptors::{s2_fft, two_point_correlation};
use microdiff::diffusion::{sample_many, SamplerConfig};
use microdiff::lbm::{LbmConfig, LbmState};
use microdiff::par::MODE;
use microdiff::synth::{generate, generate_dataset, GenSpec, GeneratorKind};
use microdiff::{Architecture, DenoiserModel, ScheduleConfig};

fn arch() -> Architecture {
    Architecture {
        shape: vec![32, 32],
        base_channels: 8,
        ..Architecture::default()
    }
}

fn inclusions(shape: &[usize], seed: u64) -> GenSpec {
    GenSpec {
        kind: GeneratorKind::Inclusions,
        shape: shape.to_vec(),
        target_fraction: 0.3,
        radius_min: 3.0,
        radius_max: 4.0,
        seed,
        ..GenSpec::default()
    }
}

fn sampling(c: &mut Criterion) {
    let s = ScheduleConfig::default().build().unwrap();
    let model = DenoiserModel::new(arch(), 0).unwrap();
    let cfg = SamplerConfig::uniform(s.steps(), 10, 0.0, 0).unwrap();
    let seeds: Vec<u64> = (0..4).collect();
    let mut g = c.benchmark_group(format!("sample/{MODE}"));
    g.sample_size(10);
    g.bench_function("4x32x32_10steps", |b| {
        b.iter(|| sample_many(&model, &cfg, None, &[32, 32], &s, &seeds).unwrap())
    });
    g.finish();
}

fn training(c: &mut Criterion) {
    let s = ScheduleConfig::default().build().unwrap();
    let mut model = DenoiserModel::new(arch(), 0).unwrap();
    let x0 = generate_dataset(&inclusions(&[32, 32], 1), 8)
        .unwrap()
        .iter()
        .map(|d| d.microstructure.to_field())
        .collect();
    let batch = TrainBatch::new(x0, None).unwrap();
    let mut opt = Optimizer::new(
        OptimizerConfig {
            kind: OptimizerKind::Adam,
            ..OptimizerConfig::default()
        },
        model.param_count(),
    );
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut g = c.benchmark_group(format!("train/{MODE}"));
    g.sample_size(10);
    g.bench_function("batch8_32x32", |b| {
        b.iter(|| train_step(&mut model, &mut opt, &batch, &s, &mut rng, 0.0, 1e-4).unwrap())
    });
    g.finish();
}

fn descriptors(c: &mut Criterion) {
    let ms = generate(&inclusions(&[128, 128], 3)).unwrap();
    let mut g = c.benchmark_group(format!("s2/{MODE}"));
    for r_max in [16usize, 63] {
        g.bench_with_input(BenchmarkId::new("brute", r_max), &r_max, |b, &r| {
            b.iter(|| two_point_correlation(&ms, r).unwrap())
        });
        g.bench_with_input(BenchmarkId::new("fft", r_max), &r_max, |b, &r| {
            b.iter(|| s2_fft(&ms, r).unwrap())
        });
    }
    g.finish();
}

fn lattice_boltzmann(c: &mut Criterion) {
    let mut g = c.benchmark_group(format!("lbm_step/{MODE}"));
    for shape in [vec![128usize, 128], vec![32, 32, 32]] {
        let ms = generate(&inclusions(&shape, 4)).unwrap();
        let mut st = LbmState::from_microstructure(&ms, 1, LbmConfig::default()).unwrap();
        let name = shape.iter().map(|n| n.to_string()).collect::<Vec<_>>().join("x");
        g.bench_function(name, |b| b.iter(|| st.step().unwrap()));
    }
    g.finish();
}

fn dataset(c: &mut Criterion) {
    let spec = inclusions(&[64, 64], 5);
    let mut g = c.benchmark_group(format!("generate/{MODE}"));
    g.sample_size(10);
    g.bench_function("inclusions_64x64_x32", |b| b.iter(|| generate_dataset(&spec, 32).unwrap()));
    g.finish();
}

criterion_group!(benches, sampling, training, descriptors, lattice_boltzmann, dataset);
criterion_main!(benches);
