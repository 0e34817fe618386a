//! Acceptance suite. Each criterion prints exactly one PASS/FAIL line; the
//! process exits non-zero if any criterion fails.
//!
//! Run alone with `cargo test -p microdiff --test acceptance`.

use std::sync::OnceLock;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex;

use microdiff::contour::{fourier_descriptor_of, trace_boundaries};
use microdiff::denoiser::{fit, GaussianOracle, OptimizerConfig, OptimizerKind, TrainItem, TrainSettings};
use microdiff::descriptors::{lineal_path, s2_fft, two_point_correlation, DescriptorCurve};
use microdiff::diffusion::{
    ddim_coefficients, ddim_step, ddpm_coefficients, ddpm_step, denoise_latent, initial_latent, sample_loop,
    sample_many, slerp, SamplerConfig, StepSpacing,
};
use microdiff::lbm::{self, classify_permeability, darcy_permeability, Boundary, LbmConfig, LbmState};
use microdiff::schedule::linear_schedule;
use microdiff::synth::{generate_dataset, GenSpec, GeneratorKind};
use microdiff::{Architecture, DenoiserModel, Field, Microstructure, NoiseSchedule, ScheduleConfig};

// Toy reconstruction setup shared by criteria 4, 9 and 10.
const TOY_SHAPE: [usize; 2] = [32, 32];
const TOY_DATA: usize = 500;
const TOY_STEPS: usize = 4000;
const TOY_SAMPLES: usize = 64;
const SAMPLING_STEPS: usize = 50;
const R_MAX: usize = 10;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn toy_arch(classes: usize) -> Architecture {
    Architecture {
        shape: TOY_SHAPE.to_vec(),
        base_channels: 8,
        channel_mults: vec![1, 2, 4],
        res_blocks: 2,
        embed_dim: 32,
        num_classes: classes,
        norm_groups: 4,
    }
}

fn toy_settings(seed: u64) -> TrainSettings {
    TrainSettings {
        steps: TOY_STEPS,
        batch_size: 8,
        lr: 2e-3,
        optimizer: OptimizerConfig {
            kind: OptimizerKind::Adam,
            ..OptimizerConfig::default()
        },
        seed,
        ..TrainSettings::default()
    }
}

fn inclusion_spec(fraction: f64, seed: u64) -> GenSpec {
    GenSpec {
        kind: GeneratorKind::Inclusions,
        shape: TOY_SHAPE.to_vec(),
        target_fraction: fraction,
        radius_min: 3.0,
        radius_max: 4.0,
        seed,
        ..GenSpec::default()
    }
}

fn schedule() -> NoiseSchedule {
    ScheduleConfig::default().build().unwrap()
}

fn mean_phi(ms: &[Microstructure]) -> f64 {
    ms.iter().map(Microstructure::volume_fraction).sum::<f64>() / ms.len() as f64
}

fn mean_s2(ms: &[Microstructure]) -> DescriptorCurve {
    let curves: Vec<_> = ms.iter().map(|m| two_point_correlation(m, R_MAX).unwrap()).collect();
    DescriptorCurve::average(&curves).unwrap()
}

fn to_images(fields: &[Field]) -> Vec<Microstructure> {
    fields.iter().map(|f| Microstructure::from_field(f, true).unwrap()).collect()
}

struct Toy {
    model: DenoiserModel,
    reference: Vec<Microstructure>,
}

fn toy() -> &'static Toy {
    static TOY: OnceLock<Toy> = OnceLock::new();
    TOY.get_or_init(|| {
        let reference: Vec<Microstructure> = generate_dataset(&inclusion_spec(0.3, 7), TOY_DATA)
            .unwrap()
            .into_iter()
            .map(|s| s.microstructure)
            .collect();
        let fields: Vec<Field> = reference.iter().map(Microstructure::to_field).collect();
        let mut model = DenoiserModel::new(toy_arch(0), 1).unwrap();
        fit(&mut model, &fields, None, &schedule(), &toy_settings(3), |_, _| {}).unwrap();
        Toy { model, reference }
    })
}

fn eta_config(eta: f64, seed: u64) -> SamplerConfig {
    SamplerConfig::uniform(schedule().steps(), SAMPLING_STEPS, eta, seed).unwrap()
}

// 1 --------------------------------------------------------------------------

fn sampler_identity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let steps = rng.random_range(10..=1000);
        let b0 = rng.random_range(1e-5..1e-3);
        let b1 = rng.random_range(5e-3..0.05);
        let s = linear_schedule(steps, b0, b1).unwrap();
        let t = rng.random_range(2..=steps);
        let a = ddpm_coefficients(t, &s).unwrap();
        let b = ddim_coefficients(t, t - 1, 1.0, &s).unwrap();
        worst = worst
            .max((a.x_coef - b.x_coef).abs())
            .max((a.eps_coef - b.eps_coef).abs())
            .max((a.noise_coef - b.noise_coef).abs());

        let shape = [4, 4];
        let x = Field::standard_normal(&shape, &mut rng).unwrap();
        let eps = Field::standard_normal(&shape, &mut rng).unwrap();
        let noise = Field::standard_normal(&shape, &mut rng).unwrap();
        let zero = Field::zeros(&shape).unwrap();
        // Mean: both updates without noise. Noise scale: the difference made
        // by adding the same noise draw.
        let m1 = ddpm_step(&x, &eps, t, &zero, &s).unwrap();
        let m2 = ddim_step(&x, &eps, t, t - 1, 1.0, &zero, &s).unwrap();
        let n1 = ddpm_step(&x, &eps, t, &noise, &s).unwrap();
        let n2 = ddim_step(&x, &eps, t, t - 1, 1.0, &noise, &s).unwrap();
        for i in 0..x.len() {
            worst = worst
                .max((m1.values()[i] - m2.values()[i]).abs())
                .max((n1.values()[i] - n2.values()[i]).abs());
        }
    }
    outcome(worst < 1e-10, format!("max deviation {worst:.2e} (tol 1e-10)"))
}

// 2 --------------------------------------------------------------------------

fn gaussian_oracle() -> Outcome {
    let s = schedule();
    let (mu0, var0) = (0.3, 0.04);
    let oracle = GaussianOracle {
        mu0,
        var0,
        schedule: s.clone(),
    };
    // Quadratic spacing: uniform strides of T/50 are too coarse near t = 1,
    // where a variance-0.04 signal separates from the noise.
    let cfg = SamplerConfig::spaced(StepSpacing::Quadratic, s.steps(), SAMPLING_STEPS, 0.0, 2024).unwrap();
    let x = sample_loop(&oracle, &cfg, None, &[100, 100], &s).unwrap();
    let n = x.len() as f64;
    let mean = x.mean();
    let var = x.values().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let rel = (var / var0 - 1.0).abs();
    let pass = (mean - mu0).abs() < 0.02 && rel < 0.15;
    outcome(
        pass,
        format!("mean {mean:.4} (target {mu0} +- 0.02), variance {var:.4} ({:.1}% off, tol 15%)", rel * 100.0),
    )
}

// 3 --------------------------------------------------------------------------

fn gradient_check(shape: Vec<usize>, classes: usize, seed: u64) -> f64 {
    let arch = Architecture {
        shape: shape.clone(),
        base_channels: 4,
        channel_mults: vec![1, 2],
        res_blocks: 1,
        embed_dim: 8,
        num_classes: classes,
        norm_groups: 2,
    };
    let s = linear_schedule(100, 1e-4, 0.02).unwrap();
    let mut model = DenoiserModel::new(arch, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Move off the zero-initialised output layer so every path carries gradient.
    for p in model.params_mut() {
        *p += rng.random_range(-0.2..0.2);
    }
    let items: Vec<TrainItem> = (0..2)
        .map(|i| TrainItem {
            x0: Field::standard_normal(&shape, &mut rng).unwrap(),
            label: (classes > 0 && i == 0).then_some(1),
            t: rng.random_range(1..=100),
            eps: Field::standard_normal(&shape, &mut rng).unwrap(),
        })
        .collect();
    let (_, grad) = model.loss_and_grad(&items, &s).unwrap();
    let h = 1e-4;
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let i = rng.random_range(0..model.param_count());
        let orig = model.params()[i];
        model.params_mut()[i] = orig + h;
        let lp = model.loss_and_grad(&items, &s).unwrap().0;
        model.params_mut()[i] = orig - h;
        let lm = model.loss_and_grad(&items, &s).unwrap().0;
        model.params_mut()[i] = orig;
        let fd = (lp - lm) / (2.0 * h);
        worst = worst.max((fd - grad[i]).abs() / fd.abs().max(grad[i].abs()).max(1e-8));
    }
    worst
}

fn gradients() -> Outcome {
    let e2 = gradient_check(vec![8, 8], 2, 21);
    let e3 = gradient_check(vec![4, 4, 4], 0, 22);
    outcome(
        e2 < 1e-3 && e3 < 1e-3,
        format!("max relative error 2D {e2:.2e}, 3D {e3:.2e} (tol 1e-3)"),
    )
}

// 4 --------------------------------------------------------------------------

fn toy_reconstruction() -> Outcome {
    let toy = toy();
    let s = schedule();
    let seeds: Vec<u64> = (1000..1000 + TOY_SAMPLES as u64).collect();
    let generated = to_images(&sample_many(&toy.model, &eta_config(0.0, 0), None, &TOY_SHAPE, &s, &seeds).unwrap());
    let (phi_ref, phi_gen) = (mean_phi(&toy.reference), mean_phi(&generated));
    let ds2 = mean_s2(&generated).mean_abs_diff(&mean_s2(&toy.reference), R_MAX);
    let dphi = (phi_gen - phi_ref).abs();
    outcome(
        ds2 < 0.05 && dphi < 0.05,
        format!(
            "{TOY_STEPS} steps: mean |dS2| {ds2:.4} (tol 0.05), phi_gen {phi_gen:.4} vs phi_ref {phi_ref:.4} (tol 0.05)"
        ),
    )
}

// 5 --------------------------------------------------------------------------

fn descriptor_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(55);
    let r_max = 32;
    let (mut fft_err, mut violations) = (0.0f64, 0usize);
    for _ in 0..200 {
        let p: f64 = rng.random_range(0.05..0.95);
        let phase: Vec<u8> = (0..64 * 64).map(|_| u8::from(rng.random_bool(p))).collect();
        let ms = Microstructure::new(&[64, 64], phase, true).unwrap();
        let brute = two_point_correlation(&ms, r_max).unwrap();
        let fast = s2_fft(&ms, r_max).unwrap();
        for (a, b) in brute.value.iter().zip(&fast.value) {
            fft_err = fft_err.max((a - b).abs());
        }
        let l = lineal_path(&ms, r_max).unwrap();
        if (l.value[0] - ms.volume_fraction()).abs() > 1e-12 {
            violations += 1;
        }
        if l.value.windows(2).any(|w| w[1] > w[0] + 1e-12) {
            violations += 1;
        }
        if l.value.iter().zip(&brute.value).any(|(l, s)| *l > s + 1e-12) {
            violations += 1;
        }
    }
    outcome(
        fft_err < 1e-9 && violations == 0,
        format!("FFT vs brute max diff {fft_err:.2e} (tol 1e-9), lineal-path violations {violations}"),
    )
}

// 6 --------------------------------------------------------------------------

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn fourier_invariances() -> Outcome {
    let mut contours = Vec::new();
    let mut seed = 600;
    while contours.len() < 50 {
        let spec = GenSpec {
            kind: GeneratorKind::Fibers,
            shape: vec![64, 64],
            target_fraction: 0.15,
            seed,
            ..GenSpec::default()
        };
        let ms = microdiff::synth::generate(&spec).unwrap();
        contours.extend(trace_boundaries(&ms).unwrap());
        seed += 1;
    }
    contours.truncate(50);

    let (mut trans, mut rot, mut scale, mut round) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    let shift = Complex::new(13.0, -7.0);
    let turn = Complex::from_polar(1.0, 0.7);
    let s = 2.5;
    for c in &contours {
        let z = c.to_complex();
        let base = fourier_descriptor_of(&z);
        let all = |d: &microdiff::contour::FourierDescriptor| -> Vec<f64> {
            d.coefficients.iter().map(|c| c.norm()).collect()
        };
        let moved: Vec<_> = z.iter().map(|p| p + shift).collect();
        trans = trans.max(max_diff(
            &fourier_descriptor_of(&moved).harmonic_magnitudes(),
            &base.harmonic_magnitudes(),
        ));
        let turned: Vec<_> = z.iter().map(|p| p * turn).collect();
        rot = rot.max(max_diff(&all(&fourier_descriptor_of(&turned)), &all(&base)));
        let scaled: Vec<_> = z.iter().map(|p| p * s).collect();
        let expect: Vec<f64> = base.harmonic_magnitudes().iter().map(|m| m * s).collect();
        scale = scale.max(max_diff(&fourier_descriptor_of(&scaled).harmonic_magnitudes(), &expect));
        for (a, b) in base.inverse().iter().zip(&z) {
            round = round.max((a - b).norm());
        }
    }
    let worst = trans.max(rot).max(scale).max(round);
    outcome(
        worst < 1e-9,
        format!(
            "50 contours: translation {trans:.1e}, rotation {rot:.1e}, scaling {scale:.1e}, roundtrip {round:.1e} (tol 1e-9)"
        ),
    )
}

// 7 --------------------------------------------------------------------------

fn channel_kappa(h: usize, drive: f64) -> (f64, bool) {
    let mut st = lbm::channel(
        2,
        h,
        LbmConfig {
            drive,
            ..LbmConfig::default()
        },
    )
    .unwrap();
    let r = st.run_to_steady(1e-9, 60_000).unwrap();
    (darcy_permeability(&st).unwrap(), r.converged)
}

fn lbm_benchmark() -> Outcome {
    let mut worst_rel: f64 = 0.0;
    let mut converged = true;
    for h in [7usize, 11, 15, 19] {
        let (k, ok) = channel_kappa(h, 1e-6);
        converged &= ok;
        worst_rel = worst_rel.max((k / ((h * h) as f64 / 12.0) - 1.0).abs());
    }

    let porous = microdiff::synth::generate(&GenSpec {
        kind: GeneratorKind::Inclusions,
        shape: vec![24, 24],
        target_fraction: 0.3,
        radius_min: 2.0,
        radius_max: 3.0,
        seed: 70,
        ..GenSpec::default()
    })
    .unwrap();
    let mut st = LbmState::from_microstructure(
        &porous,
        1,
        LbmConfig {
            drive: 1e-4,
            boundaries: vec![Boundary::Periodic, Boundary::Periodic],
            ..LbmConfig::default()
        },
    )
    .unwrap();
    let mut mass_drift: f64 = 0.0;
    for _ in 0..500 {
        let m0 = st.total_mass();
        st.step().unwrap();
        mass_drift = mass_drift.max((st.total_mass() - m0).abs() / m0);
    }

    let (k1, ok1) = channel_kappa(11, 1e-6);
    let (k10, ok10) = channel_kappa(11, 1e-5);
    let lin = (k10 / k1 - 1.0).abs();
    converged &= ok1 && ok10;
    outcome(
        converged && worst_rel < 0.03 && mass_drift < 1e-10 && lin < 0.01,
        format!(
            "channel worst error {:.2}% (tol 3%), mass drift {mass_drift:.1e}/step (tol 1e-10), 10x drive change {:.3}% (tol 1%), converged {converged}",
            worst_rel * 100.0,
            lin * 100.0
        ),
    )
}

// 8 --------------------------------------------------------------------------

fn classifier() -> Outcome {
    let cases = [(0.14, 0), (0.44, 1), (0.66, 2), (1.83, 3), (4.57, 4), (10.93, 5)];
    let got: Vec<usize> = cases.iter().map(|&(k, _)| classify_permeability(k).unwrap().index).collect();
    let want: Vec<usize> = cases.iter().map(|&(_, c)| c).collect();
    outcome(got == want, format!("classes {got:?} (expected {want:?})"))
}

// 9 --------------------------------------------------------------------------

fn eta_regulation() -> Outcome {
    let toy = toy();
    let s = schedule();
    let seeds: Vec<u64> = (2000..2020).collect();
    let reference = to_images(&sample_many(&toy.model, &eta_config(0.0, 0), None, &TOY_SHAPE, &s, &seeds).unwrap());
    let etas = [0.0, 0.1, 0.4, 0.7, 1.0];
    let mut means = Vec::new();
    for &eta in &etas {
        let imgs = to_images(&sample_many(&toy.model, &eta_config(eta, 0), None, &TOY_SHAPE, &s, &seeds).unwrap());
        let h: f64 = imgs
            .iter()
            .zip(&reference)
            .map(|(a, b)| a.hamming_fraction(b).unwrap())
            .sum::<f64>()
            / seeds.len() as f64;
        means.push(h);
    }
    let pass = means[0] == 0.0 && means[4] > means[1];
    let listing: Vec<String> = etas.iter().zip(&means).map(|(e, h)| format!("{e}:{h:.4}")).collect();
    outcome(pass, format!("mean Hamming by eta [{}] over 20 seeds", listing.join(", ")))
}

// 10 -------------------------------------------------------------------------

fn determinism_and_interpolation() -> Outcome {
    let toy = toy();
    let s = schedule();
    let a = sample_loop(&toy.model, &eta_config(0.0, 31), None, &TOY_SHAPE, &s).unwrap();
    let b = sample_loop(&toy.model, &eta_config(0.0, 31), None, &TOY_SHAPE, &s).unwrap();
    let c = sample_loop(&toy.model, &eta_config(0.0, 32), None, &TOY_SHAPE, &s).unwrap();
    let repeat = bits(&a) == bits(&b);

    let z0 = initial_latent(&TOY_SHAPE, 31).unwrap();
    let z1 = initial_latent(&TOY_SHAPE, 32).unwrap();
    let mut endpoints = Vec::new();
    for (alpha, expected) in [(0.0, &a), (1.0, &c)] {
        let z = slerp(&z0, &z1, alpha).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let x = denoise_latent(&toy.model, &eta_config(0.0, 0), None, z, &mut rng, &s).unwrap();
        endpoints.push(bits(&x) == bits(expected));
    }
    let pass = repeat && endpoints.iter().all(|&e| e);
    outcome(
        pass,
        format!("repeat bit-identical {repeat}, slerp endpoints bit-identical {endpoints:?}"),
    )
}

fn bits(f: &Field) -> Vec<u64> {
    f.values().iter().map(|v| v.to_bits()).collect()
}

// 11 -------------------------------------------------------------------------

fn conditional_generation() -> Outcome {
    let fractions = [0.2, 0.4];
    let mut fields = Vec::new();
    let mut labels = Vec::new();
    let mut class_means = Vec::new();
    for (label, &f) in fractions.iter().enumerate() {
        let data: Vec<Microstructure> = generate_dataset(&inclusion_spec(f, 40 + label as u64), TOY_DATA)
            .unwrap()
            .into_iter()
            .map(|s| s.microstructure)
            .collect();
        class_means.push(mean_phi(&data));
        fields.extend(data.iter().map(Microstructure::to_field));
        labels.extend(std::iter::repeat_n(label, data.len()));
    }
    let s = schedule();
    let mut model = DenoiserModel::new(toy_arch(2), 5).unwrap();
    // The label only shifts the noise prediction slightly at large t, where
    // the volume fraction gets decided; batch 8 leaves that signal buried in
    // gradient noise.
    let settings = TrainSettings {
        steps: 2 * TOY_STEPS,
        batch_size: 16,
        ..toy_settings(6)
    };
    fit(&mut model, &fields, Some(&labels), &s, &settings, |_, _| {}).unwrap();

    let seeds: Vec<u64> = (3000..3000 + TOY_SAMPLES as u64).collect();
    let cfg = eta_config(0.0, 0).with_guidance(1.0);
    let mut gen_means = Vec::new();
    for label in 0..fractions.len() {
        let imgs = to_images(&sample_many(&model, &cfg, Some(label), &TOY_SHAPE, &s, &seeds).unwrap());
        gen_means.push(mean_phi(&imgs));
    }
    let within = gen_means.iter().zip(&class_means).all(|(g, c)| (g - c).abs() < 0.07);
    let ordered = gen_means[1] > gen_means[0];
    outcome(
        within && ordered,
        format!(
            "label 0: phi {:.4} vs class {:.4}; label 1: phi {:.4} vs class {:.4} (tol 0.07, w=1)",
            gen_means[0], class_means[0], gen_means[1], class_means[1]
        ),
    )
}

type Criterion = (&'static str, fn() -> Outcome);

fn main() {
    // The default test harness passes flags like --nocapture or a filter;
    // a filter selects criteria by number.
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let criteria: [Criterion; 11] = [
        ("sampler identity", sampler_identity),
        ("gaussian oracle end-to-end", gaussian_oracle),
        ("gradient correctness", gradients),
        ("toy reconstruction", toy_reconstruction),
        ("descriptor oracles", descriptor_oracles),
        ("fourier invariances", fourier_invariances),
        ("lbm benchmark", lbm_benchmark),
        ("permeability classifier", classifier),
        ("eta randomness regulation", eta_regulation),
        ("determinism and interpolation", determinism_and_interpolation),
        ("conditional generation", conditional_generation),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let n = i + 1;
        if !filter.is_empty() && !filter.iter().any(|f| f == &n.to_string()) {
            continue;
        }
        let start = Instant::now();
        let o = run();
        let status = if o.pass { "PASS" } else { "FAIL" };
        println!(
            "criterion {n:>2} {status} {name}: {} [{:.1}s]",
            o.detail,
            start.elapsed().as_secs_f64()
        );
        failed += usize::from(!o.pass);
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
