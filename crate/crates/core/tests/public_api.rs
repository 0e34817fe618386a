//! End-to-end checks through the public API only.

use microdiff::contour::trace_boundaries;
use microdiff::denoiser::{load_checkpoint, save_checkpoint};
use microdiff::descriptors::{s2_fft, two_point_correlation};
use microdiff::diffusion::{sample_loop, sample_many, SamplerConfig};
use microdiff::io::{read_microstructure, write_microstructure};
use microdiff::lbm::{classify_permeability, darcy_permeability, LbmConfig, LbmState};
use microdiff::synth::{generate, GenSpec, GeneratorKind};
use microdiff::{Architecture, DenoiserModel, Microstructure, ScheduleConfig};

fn small_arch() -> Architecture {
    Architecture {
        shape: vec![8, 8],
        base_channels: 4,
        channel_mults: vec![1, 2],
        res_blocks: 1,
        embed_dim: 8,
        num_classes: 2,
        norm_groups: 2,
    }
}

fn perturbed_model() -> DenoiserModel {
    let mut m = DenoiserModel::new(small_arch(), 4).unwrap();
    // A fresh model predicts exactly zero; give every layer some signal.
    for (i, p) in m.params_mut().iter_mut().enumerate() {
        *p += 0.05 * ((i as f64) * 0.37).sin();
    }
    m
}

#[test]
fn microstructures_survive_disk_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    for shape in [vec![24, 16], vec![10, 8, 6]] {
        let spec = GenSpec {
            kind: GeneratorKind::Harmonic,
            shape: shape.clone(),
            seed: 9,
            ..GenSpec::default()
        };
        let ms = generate(&spec).unwrap();
        let ext = if shape.len() == 2 { "pgm" } else { "raw" };
        let path = dir.path().join(format!("img.{ext}"));
        write_microstructure(&path, &ms).unwrap();
        let back = read_microstructure(&path, true).unwrap();
        assert_eq!(back.shape(), ms.shape());
        assert_eq!(back.phases(), ms.phases());
    }
}

#[test]
fn checkpoint_reload_matches_f32_rounded_model() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let model = perturbed_model();
    let sched = ScheduleConfig {
        steps: 40,
        ..ScheduleConfig::default()
    };
    save_checkpoint(&path, &model, &sched, 4, 123).unwrap();
    let (header, loaded) = load_checkpoint(&path).unwrap();
    assert_eq!(header.step, 123);
    assert_eq!(header.schedule, sched);

    let mut rounded = model.clone();
    rounded.round_to_f32();
    let s = sched.build().unwrap();
    let cfg = SamplerConfig::uniform(40, 8, 0.0, 17).unwrap().with_guidance(1.0);
    let a = sample_loop(&loaded, &cfg, Some(1), &[8, 8], &s).unwrap();
    let b = sample_loop(&rounded, &cfg, Some(1), &[8, 8], &s).unwrap();
    assert_eq!(a.values(), b.values());
}

#[test]
fn batched_sampling_matches_one_at_a_time() {
    let model = perturbed_model();
    let s = ScheduleConfig {
        steps: 40,
        ..ScheduleConfig::default()
    }
    .build()
    .unwrap();
    let cfg = SamplerConfig::uniform(40, 10, 0.5, 0).unwrap();
    let seeds = [3u64, 8, 1];
    let batch = sample_many(&model, &cfg, Some(0), &[8, 8], &s, &seeds).unwrap();
    for (x, &seed) in batch.iter().zip(&seeds) {
        let single = sample_loop(&model, &cfg.clone().with_seed(seed), Some(0), &[8, 8], &s).unwrap();
        assert_eq!(x.values(), single.values());
        assert!(x.values().iter().all(|v| (-1.0..=1.0).contains(v)));
    }
}

#[test]
fn complement_shifts_two_point_correlation() {
    // S2 of the other phase is 1 - 2 phi + S2(r).
    let spec = GenSpec {
        kind: GeneratorKind::Inclusions,
        shape: vec![48, 48],
        target_fraction: 0.25,
        seed: 12,
        ..GenSpec::default()
    };
    let ms = generate(&spec).unwrap();
    let phi = ms.volume_fraction();
    let s2 = two_point_correlation(&ms, 20).unwrap();
    let s2c = s2_fft(&ms.complement(), 20).unwrap();
    for (a, b) in s2.value.iter().zip(&s2c.value) {
        assert!((b - (1.0 - 2.0 * phi + a)).abs() < 1e-12);
    }
}

#[test]
fn traced_inclusion_boundaries_are_closed() {
    let spec = GenSpec {
        kind: GeneratorKind::Inclusions,
        shape: vec![64, 64],
        target_fraction: 0.2,
        radius_min: 4.0,
        radius_max: 6.0,
        periodic: false,
        seed: 3,
        ..GenSpec::default()
    };
    let contours = trace_boundaries(&generate(&spec).unwrap()).unwrap();
    assert!(!contours.is_empty());
    assert!(contours.iter().all(|c| c.is_closed_chain()));
}

#[test]
fn porous_volume_permeability_is_classified() {
    let spec = GenSpec {
        kind: GeneratorKind::Inclusions,
        shape: vec![12, 12, 12],
        target_fraction: 0.2,
        radius_min: 2.0,
        radius_max: 3.0,
        seed: 5,
        ..GenSpec::default()
    };
    let ms = generate(&spec).unwrap();
    let open = Microstructure::filled(&[12, 12, 12], 0, true).unwrap();
    let mut st = LbmState::from_microstructure(&ms, 1, LbmConfig::default()).unwrap();
    let report = st.run_to_steady(1e-6, 20_000).unwrap();
    assert!(report.converged, "{report:?}");
    let kappa = darcy_permeability(&st).unwrap();
    assert!(kappa > 0.0 && kappa.is_finite());
    assert!(classify_permeability(kappa).is_ok());

    // Without obstacles a periodic body force just accelerates the fluid.
    let mut free = LbmState::from_microstructure(&open, 1, LbmConfig::default()).unwrap();
    let r = free.run_to_steady(1e-6, 300).unwrap();
    assert!(!r.converged);
}
