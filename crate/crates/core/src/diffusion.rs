//! Forward noising, DDPM/DDIM reverse updates, classifier-free guidance,
//! latent interpolation and the sampling loop.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::field::Field;
use crate::schedule::NoiseSchedule;

/// Anything that predicts the noise component of `x_t`.
///
/// `label == None` selects the unconditional (null-label) branch.
pub trait NoisePredictor: Sync {
    fn predict_eps(&self, x_t: &Field, t: usize, label: Option<usize>) -> Result<Field>;
}

impl<P: NoisePredictor + ?Sized> NoisePredictor for &P {
    fn predict_eps(&self, x_t: &Field, t: usize, label: Option<usize>) -> Result<Field> {
        (**self).predict_eps(x_t, t, label)
    }
}

/// `sqrt(alpha_bar_t) * x0 + sqrt(1 - alpha_bar_t) * eps`.
pub fn forward_sample(x0: &Field, t: usize, eps: &Field, s: &NoiseSchedule) -> Result<Field> {
    s.check_step(t)?;
    let ab = s.alpha_bar(t);
    x0.axpby(ab.sqrt(), eps, (1.0 - ab).sqrt())
}

/// Clean-data estimate implied by a noise prediction at step `t`.
pub fn predict_x0(x_t: &Field, eps: &Field, t: usize, s: &NoiseSchedule) -> Result<Field> {
    let ab = s.alpha_bar(t);
    x_t.axpby(1.0 / ab.sqrt(), eps, -(1.0 - ab).sqrt() / ab.sqrt())
}

/// Linear form of one reverse update:
/// `x_next = x_coef * x_t + eps_coef * eps_pred + noise_coef * noise`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepCoefficients {
    pub x_coef: f64,
    pub eps_coef: f64,
    pub noise_coef: f64,
}

/// Coefficients of the ancestral (posterior-mean plus posterior-variance) step.
pub fn ddpm_coefficients(t: usize, s: &NoiseSchedule) -> Result<StepCoefficients> {
    s.check_step(t)?;
    let a = s.alpha(t);
    let ab = s.alpha_bar(t);
    Ok(StepCoefficients {
        x_coef: 1.0 / a.sqrt(),
        eps_coef: -(1.0 - a) / ((1.0 - ab).sqrt() * a.sqrt()),
        noise_coef: s.posterior_variance(t).sqrt(),
    })
}

/// DDIM variance `sigma_t^2` for a jump from `t` to `t_prev`.
pub fn ddim_sigma2(t: usize, t_prev: usize, eta: f64, s: &NoiseSchedule) -> f64 {
    let ab = s.alpha_bar(t);
    let ab_prev = s.alpha_bar(t_prev);
    eta * eta * (1.0 - ab_prev) / (1.0 - ab) * (1.0 - ab / ab_prev)
}

/// Coefficients of the DDIM update from `t` to `t_prev` (`t_prev = 0` means
/// clean data).
pub fn ddim_coefficients(
    t: usize,
    t_prev: usize,
    eta: f64,
    s: &NoiseSchedule,
) -> Result<StepCoefficients> {
    check_ddim_args(t, t_prev, eta, s)?;
    let ab = s.alpha_bar(t);
    let ab_prev = s.alpha_bar(t_prev);
    let sigma2 = ddim_sigma2(t, t_prev, eta, s);
    let dir = direction_coef(ab_prev, sigma2)?;
    let x0_scale = ab_prev.sqrt() / ab.sqrt();
    Ok(StepCoefficients {
        x_coef: x0_scale,
        eps_coef: -x0_scale * (1.0 - ab).sqrt() + dir,
        noise_coef: sigma2.sqrt(),
    })
}

fn check_ddim_args(t: usize, t_prev: usize, eta: f64, s: &NoiseSchedule) -> Result<()> {
    s.check_step(t)?;
    if t_prev >= t {
        return invalid!("t_prev ({t_prev}) must be below t ({t})");
    }
    if !(0.0..=1.0).contains(&eta) {
        return invalid!("eta must lie in [0, 1], got {eta}");
    }
    Ok(())
}

fn direction_coef(ab_prev: f64, sigma2: f64) -> Result<f64> {
    let rem = 1.0 - ab_prev - sigma2;
    if rem < -1e-12 {
        return invalid!("1 - alpha_bar_prev - sigma^2 = {rem} < 0: invalid eta/step combination");
    }
    Ok(rem.max(0.0).sqrt())
}

/// One ancestral reverse step: posterior mean plus `sqrt(beta_tilde_t) * noise`.
/// At `t = 1` the noise is ignored.
pub fn ddpm_step(
    x_t: &Field,
    eps_pred: &Field,
    t: usize,
    noise: &Field,
    s: &NoiseSchedule,
) -> Result<Field> {
    s.check_step(t)?;
    x_t.ensure_same_shape(eps_pred)?;
    x_t.ensure_same_shape(noise)?;
    let a = s.alpha(t);
    let ab = s.alpha_bar(t);
    let mean = x_t
        .axpby(1.0, eps_pred, -(1.0 - a) / (1.0 - ab).sqrt())?
        .map(|v| v / a.sqrt());
    if t == 1 {
        return Ok(mean);
    }
    mean.axpby(1.0, noise, s.posterior_variance(t).sqrt())
}

/// One DDIM step from `t` to `t_prev`:
/// predicted clean data, the direction back towards `x_t`, and optional noise.
#[allow(clippy::too_many_arguments)]
pub fn ddim_step(
    x_t: &Field,
    eps_pred: &Field,
    t: usize,
    t_prev: usize,
    eta: f64,
    noise: &Field,
    s: &NoiseSchedule,
) -> Result<Field> {
    check_ddim_args(t, t_prev, eta, s)?;
    x_t.ensure_same_shape(eps_pred)?;
    x_t.ensure_same_shape(noise)?;
    let ab_prev = s.alpha_bar(t_prev);
    let sigma2 = ddim_sigma2(t, t_prev, eta, s);
    let dir = direction_coef(ab_prev, sigma2)?;
    let x0 = predict_x0(x_t, eps_pred, t, s)?;
    let out = x0.axpby(ab_prev.sqrt(), eps_pred, dir)?;
    if sigma2 == 0.0 {
        return Ok(out);
    }
    out.axpby(1.0, noise, sigma2.sqrt())
}

/// Classifier-free guidance: `(1 + w) * eps_cond - w * eps_uncond`.
pub fn guided_eps(eps_cond: &Field, eps_uncond: &Field, w: f64) -> Result<Field> {
    if !(w >= 0.0) {
        return invalid!("guidance weight must be >= 0, got {w}");
    }
    if w == 0.0 {
        eps_cond.ensure_same_shape(eps_uncond)?;
        return Ok(eps_cond.clone());
    }
    eps_cond.axpby(1.0 + w, eps_uncond, -w)
}

/// Spherical linear interpolation between two latents.
///
/// Near-parallel inputs (|cos θ| > 1 - 1e-7) fall back to linear
/// interpolation. The endpoints are returned exactly.
pub fn slerp(z0: &Field, z1: &Field, alpha: f64) -> Result<Field> {
    z0.ensure_same_shape(z1)?;
    if !(0.0..=1.0).contains(&alpha) {
        return invalid!("interpolation weight must lie in [0, 1], got {alpha}");
    }
    let (n0, n1) = (z0.norm(), z1.norm());
    if n0 == 0.0 || n1 == 0.0 {
        return invalid!("slerp endpoints must be nonzero");
    }
    if alpha == 0.0 {
        return Ok(z0.clone());
    }
    if alpha == 1.0 {
        return Ok(z1.clone());
    }
    let cos = (z0.dot(z1)? / (n0 * n1)).clamp(-1.0, 1.0);
    if cos.abs() > 1.0 - 1e-7 {
        return z0.axpby(1.0 - alpha, z1, alpha);
    }
    let theta = cos.acos();
    let st = theta.sin();
    z0.axpby(
        ((1.0 - alpha) * theta).sin() / st,
        z1,
        (alpha * theta).sin() / st,
    )
}

/// Sampler settings: DDIM stochasticity, the visited time steps, guidance
/// strength and the seed of the latent/noise stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub eta: f64,
    pub step_sequence: Vec<usize>,
    pub guidance_weight: f64,
    pub seed: u64,
}

impl SamplerConfig {
    /// `n` roughly evenly spaced steps ending at `T`.
    pub fn uniform(total_steps: usize, n: usize, eta: f64, seed: u64) -> Result<Self> {
        Self::spaced(StepSpacing::Uniform, total_steps, n, eta, seed)
    }

    /// `n` steps ending at `T` with the given spacing.
    pub fn spaced(spacing: StepSpacing, total_steps: usize, n: usize, eta: f64, seed: u64) -> Result<Self> {
        Ok(Self {
            eta,
            step_sequence: spacing.steps(total_steps, n)?,
            guidance_weight: 0.0,
            seed,
        })
    }

    pub fn with_guidance(mut self, w: f64) -> Self {
        self.guidance_weight = w;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_eta(mut self, eta: f64) -> Self {
        self.eta = eta;
        self
    }

    pub fn validate(&self, s: &NoiseSchedule) -> Result<()> {
        if !(0.0..=1.0).contains(&self.eta) {
            return invalid!("eta must lie in [0, 1], got {}", self.eta);
        }
        if !(self.guidance_weight >= 0.0) {
            return invalid!("guidance weight must be >= 0, got {}", self.guidance_weight);
        }
        let seq = &self.step_sequence;
        if seq.is_empty() {
            return invalid!("step sequence is empty");
        }
        if seq[0] == 0 || seq.windows(2).any(|w| w[0] >= w[1]) {
            return invalid!("step sequence must be strictly increasing within 1..=T");
        }
        if *seq.last().unwrap() != s.steps() {
            return invalid!(
                "step sequence must end at T = {}, ends at {}",
                s.steps(),
                seq.last().unwrap()
            );
        }
        Ok(())
    }

    /// True when the configuration reproduces ancestral DDPM sampling.
    pub fn is_ancestral(&self, s: &NoiseSchedule) -> bool {
        self.eta == 1.0 && self.step_sequence.len() == s.steps()
    }
}

/// How a reduced step sequence is spread over `1..=T`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StepSpacing {
    #[default]
    Uniform,
    /// Dense near `t = 1`, where a low-variance signal emerges from the noise.
    Quadratic,
}

impl StepSpacing {
    pub fn steps(self, total_steps: usize, n: usize) -> Result<Vec<usize>> {
        match self {
            StepSpacing::Uniform => uniform_steps(total_steps, n),
            StepSpacing::Quadratic => quadratic_steps(total_steps, n),
        }
    }
}

impl std::str::FromStr for StepSpacing {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(StepSpacing::Uniform),
            "quadratic" => Ok(StepSpacing::Quadratic),
            _ => invalid!("unknown step spacing '{s}' (expected uniform or quadratic)"),
        }
    }
}

/// `n` steps `round(T * (k / n)^2)`, `k = 1..=n`, bumped where needed to stay
/// strictly increasing.
pub fn quadratic_steps(total_steps: usize, n: usize) -> Result<Vec<usize>> {
    if n == 0 || n > total_steps {
        return invalid!("need 1 <= sampling steps <= T = {total_steps}, got {n}");
    }
    let mut out: Vec<usize> = Vec::with_capacity(n);
    for k in 1..=n {
        let q = (total_steps as f64 * (k as f64 / n as f64).powi(2)).round() as usize;
        let floor = out.last().map_or(1, |&p| p + 1);
        out.push(q.max(floor));
    }
    Ok(out)
}

/// `n` steps `round(k * T / n)`, `k = 1..=n`.
pub fn uniform_steps(total_steps: usize, n: usize) -> Result<Vec<usize>> {
    if n == 0 || n > total_steps {
        return invalid!("need 1 <= sampling steps <= T = {total_steps}, got {n}");
    }
    Ok((1..=n)
        .map(|k| ((k * total_steps) as f64 / n as f64).round() as usize)
        .collect())
}

/// Noise estimate for one reverse step, with guidance when a label is given
/// and the weight is positive.
pub fn guided_prediction<M: NoisePredictor + ?Sized>(
    model: &M,
    x_t: &Field,
    t: usize,
    cond: Option<usize>,
    w: f64,
) -> Result<Field> {
    match cond {
        Some(label) if w > 0.0 => {
            let eps_c = model.predict_eps(x_t, t, Some(label))?;
            let eps_u = model.predict_eps(x_t, t, None)?;
            guided_eps(&eps_c, &eps_u, w)
        }
        _ => model.predict_eps(x_t, t, cond),
    }
}

/// Draw `x_T` from the seeded stream and denoise it down the step sequence.
///
/// The returned field is the final clean-data estimate clamped to [-1, 1].
pub fn sample_loop<M: NoisePredictor + ?Sized>(
    model: &M,
    cfg: &SamplerConfig,
    cond: Option<usize>,
    shape: &[usize],
    s: &NoiseSchedule,
) -> Result<Field> {
    cfg.validate(s)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let latent = Field::standard_normal(shape, &mut rng)?;
    denoise_latent(model, cfg, cond, latent, &mut rng, s)
}

/// [`sample_loop`] once per seed (overriding `cfg.seed`), in parallel.
pub fn sample_many<M: NoisePredictor + ?Sized>(
    model: &M,
    cfg: &SamplerConfig,
    cond: Option<usize>,
    shape: &[usize],
    s: &NoiseSchedule,
    seeds: &[u64],
) -> Result<Vec<Field>> {
    cfg.validate(s)?;
    crate::par::map_slice(seeds, |&seed| {
        sample_loop(model, &cfg.clone().with_seed(seed), cond, shape, s)
    })
    .into_iter()
    .collect()
}

/// The latent `x_T` that [`sample_loop`] starts from for a given seed.
pub fn initial_latent(shape: &[usize], seed: u64) -> Result<Field> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Field::standard_normal(shape, &mut rng)
}

/// Reverse process from an explicit latent. Per-step noise is drawn from
/// `rng` at every step (including deterministic ones) so that streams stay
/// aligned across eta values.
pub fn denoise_latent<M: NoisePredictor + ?Sized>(
    model: &M,
    cfg: &SamplerConfig,
    cond: Option<usize>,
    latent: Field,
    rng: &mut ChaCha8Rng,
    s: &NoiseSchedule,
) -> Result<Field> {
    cfg.validate(s)?;
    let ancestral = cfg.is_ancestral(s);
    let seq = &cfg.step_sequence;
    let mut x = latent;
    for k in (0..seq.len()).rev() {
        let t = seq[k];
        let t_prev = if k == 0 { 0 } else { seq[k - 1] };
        let eps = guided_prediction(model, &x, t, cond, cfg.guidance_weight)?;
        if eps.shape() != x.shape() {
            return Err(Error::ShapeMismatch {
                expected: x.shape().to_vec(),
                actual: eps.shape().to_vec(),
            });
        }
        let noise = Field::standard_normal(x.shape(), rng)?;
        x = if ancestral {
            ddpm_step(&x, &eps, t, &noise, s)?
        } else {
            ddim_step(&x, &eps, t, t_prev, cfg.eta, &noise, s)?
        };
        if !x.is_finite() {
            return Err(Error::Divergence(format!(
                "non-finite sample values at step {t}"
            )));
        }
    }
    Ok(x.clamp(-1.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::linear_schedule;
    use proptest::prelude::*;

    fn scalar(v: f64) -> Field {
        Field::new(&[1], vec![v]).unwrap()
    }

    fn random_field(shape: &[usize], seed: u64) -> Field {
        initial_latent(shape, seed).unwrap()
    }

    #[test]
    fn forward_zero_cases() {
        let s = linear_schedule(100, 1e-3, 0.05).unwrap();
        let x0 = random_field(&[4, 4], 1);
        let eps = random_field(&[4, 4], 2);
        let zeros = Field::zeros(&[4, 4]).unwrap();
        let a = forward_sample(&x0, 40, &zeros, &s).unwrap();
        for (o, x) in a.values().iter().zip(x0.values()) {
            assert_eq!(*o, s.alpha_bar(40).sqrt() * x);
        }
        let b = forward_sample(&zeros, 40, &eps, &s).unwrap();
        for (o, e) in b.values().iter().zip(eps.values()) {
            assert_eq!(*o, (1.0 - s.alpha_bar(40)).sqrt() * e);
        }
        assert!(forward_sample(&x0, 101, &eps, &s).is_err());
        assert!(forward_sample(&x0, 3, &Field::zeros(&[16]).unwrap(), &s).is_err());
    }

    #[test]
    fn forward_moments_monte_carlo() {
        let s = linear_schedule(200, 1e-4, 0.02).unwrap();
        let t = s.steps();
        let x0 = Field::new(&[3], vec![-0.7, 0.1, 0.9]).unwrap();
        let n = 10_000;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut sum = [0.0; 3];
        let mut sq = [0.0; 3];
        for _ in 0..n {
            let eps = Field::standard_normal(&[3], &mut rng).unwrap();
            let xt = forward_sample(&x0, t, &eps, &s).unwrap();
            for i in 0..3 {
                sum[i] += xt.values()[i];
                sq[i] += xt.values()[i] * xt.values()[i];
            }
        }
        let var_target = 1.0 - s.alpha_bar(t);
        for i in 0..3 {
            let mean = sum[i] / n as f64;
            let var = sq[i] / n as f64 - mean * mean;
            let sigma = var_target.sqrt();
            assert!((mean - s.alpha_bar(t).sqrt() * x0.values()[i]).abs() < 5.0 * sigma / 100.0);
            assert!((var / var_target - 1.0).abs() < 0.05);
        }
    }

    #[test]
    fn ddpm_hand_evaluated_scalar() {
        let s = NoiseSchedule::from_betas(vec![0.5, 0.5]).unwrap();
        let zero = scalar(0.0);
        let out = ddpm_step(&scalar(1.0), &scalar(0.5), 2, &zero, &s).unwrap();
        let expected = (1.0 / 0.5f64.sqrt()) * (1.0 - 0.5 / 0.75f64.sqrt() * 0.5);
        assert!((out.values()[0] - expected).abs() < 1e-15);
        // noise is ignored at t = 1
        let a = ddpm_step(&scalar(1.0), &scalar(0.5), 1, &scalar(3.0), &s).unwrap();
        let b = ddpm_step(&scalar(1.0), &scalar(0.5), 1, &zero, &s).unwrap();
        assert_eq!(a, b);
        assert!(ddpm_step(&scalar(1.0), &scalar(0.5), 3, &zero, &s).is_err());
    }

    #[test]
    fn exact_noise_inversion() {
        let s = linear_schedule(1000, 1e-4, 0.02).unwrap();
        let x0 = random_field(&[5, 5], 3);
        let eps = random_field(&[5, 5], 4);
        for t in [1, 10, 500, 1000] {
            let xt = forward_sample(&x0, t, &eps, &s).unwrap();
            let back = predict_x0(&xt, &eps, t, &s).unwrap();
            let ddim = ddim_step(&xt, &eps, t, 0, 0.0, &eps, &s).unwrap();
            for ((a, b), c) in back.values().iter().zip(ddim.values()).zip(x0.values()) {
                assert!((a - c).abs() < 1e-10);
                assert!((b - c).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn ddim_eta_zero_ignores_noise() {
        let s = linear_schedule(50, 1e-3, 0.05).unwrap();
        let x = random_field(&[3, 3], 5);
        let eps = random_field(&[3, 3], 6);
        let n1 = random_field(&[3, 3], 7);
        let n2 = random_field(&[3, 3], 8);
        let a = ddim_step(&x, &eps, 30, 20, 0.0, &n1, &s).unwrap();
        let b = ddim_step(&x, &eps, 30, 20, 0.0, &n2, &s).unwrap();
        let c = ddim_step(&x, &eps, 30, 20, 0.0, &n1, &s).unwrap();
        assert_eq!(a, b);
        assert_eq!(a, c);
        assert!(ddim_step(&x, &eps, 20, 20, 0.0, &n1, &s).is_err());
        assert!(ddim_step(&x, &eps, 20, 10, 1.5, &n1, &s).is_err());
    }

    #[test]
    fn guidance_cases() {
        let c = scalar(1.0);
        let u = scalar(0.0);
        assert_eq!(guided_eps(&c, &u, 2.0).unwrap().values()[0], 3.0);
        assert_eq!(guided_eps(&c, &u, 0.0).unwrap(), c);
        let same = random_field(&[4], 9);
        for w in [0.0, 0.5, 3.0] {
            let g = guided_eps(&same, &same, w).unwrap();
            for (a, b) in g.values().iter().zip(same.values()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        assert!(guided_eps(&c, &u, -1.0).is_err());
    }

    #[test]
    fn slerp_cases() {
        let z0 = random_field(&[8], 10);
        let z1 = random_field(&[8], 11);
        assert_eq!(slerp(&z0, &z1, 0.0).unwrap(), z0);
        assert_eq!(slerp(&z0, &z1, 1.0).unwrap(), z1);
        let e0 = Field::new(&[2], vec![1.0, 0.0]).unwrap();
        let e1 = Field::new(&[2], vec![0.0, 1.0]).unwrap();
        let mid = slerp(&e0, &e1, 0.5).unwrap();
        let r = 1.0 / 2f64.sqrt();
        assert!((mid.values()[0] - r).abs() < 1e-10 && (mid.values()[1] - r).abs() < 1e-10);
        // parallel inputs fall back to the linear path
        let twice = e0.map(|v| 2.0 * v);
        let lin = slerp(&e0, &twice, 0.25).unwrap();
        assert!((lin.values()[0] - 1.25).abs() < 1e-12);
        assert!(slerp(&e0, &Field::zeros(&[2]).unwrap(), 0.5).is_err());
    }

    #[test]
    fn sampler_config_validation() {
        let s = linear_schedule(10, 1e-3, 0.05).unwrap();
        let ok = SamplerConfig::uniform(10, 5, 0.0, 1).unwrap();
        assert_eq!(ok.step_sequence, vec![2, 4, 6, 8, 10]);
        ok.validate(&s).unwrap();
        let mut bad = ok.clone();
        bad.step_sequence = vec![2, 2, 10];
        assert!(bad.validate(&s).is_err());
        bad.step_sequence = vec![2, 5];
        assert!(bad.validate(&s).is_err());
        assert!(ok.clone().with_eta(1.2).validate(&s).is_err());
        assert!(uniform_steps(10, 11).is_err());
        assert_eq!(uniform_steps(10, 10).unwrap(), (1..=10).collect::<Vec<_>>());
    }

    #[test]
    fn quadratic_spacing() {
        assert_eq!(quadratic_steps(100, 5).unwrap(), vec![4, 16, 36, 64, 100]);
        assert_eq!(quadratic_steps(10, 10).unwrap(), (1..=10).collect::<Vec<_>>());
        assert!(quadratic_steps(10, 0).is_err());
        assert_eq!("quadratic".parse::<StepSpacing>().unwrap(), StepSpacing::Quadratic);
        assert!("cubic".parse::<StepSpacing>().is_err());
    }

    proptest! {
        #[test]
        fn slerp_preserves_unit_norm(seed in 0u64..1000, alpha in 0.0f64..=1.0) {
            let a = random_field(&[16], seed);
            let b = random_field(&[16], seed + 7919);
            let a = a.map(|v| v / a.norm());
            let b = b.map(|v| v / b.norm());
            let z = slerp(&a, &b, alpha).unwrap();
            prop_assert!((z.norm() - 1.0).abs() < 1e-9);
        }

        #[test]
        fn ddim_eta_one_matches_ddpm(t in 2usize..200, seed in 0u64..1000) {
            let s = linear_schedule(200, 1e-4, 0.03).unwrap();
            let p = ddpm_coefficients(t, &s).unwrap();
            let d = ddim_coefficients(t, t - 1, 1.0, &s).unwrap();
            prop_assert!((p.x_coef - d.x_coef).abs() < 1e-10);
            prop_assert!((p.eps_coef - d.eps_coef).abs() < 1e-10);
            prop_assert!((p.noise_coef - d.noise_coef).abs() < 1e-10);
            let x = random_field(&[6], seed);
            let e = random_field(&[6], seed + 1);
            let n = random_field(&[6], seed + 2);
            let a = ddpm_step(&x, &e, t, &n, &s).unwrap();
            let b = ddim_step(&x, &e, t, t - 1, 1.0, &n, &s).unwrap();
            for (u, v) in a.values().iter().zip(b.values()) {
                prop_assert!((u - v).abs() < 1e-10);
            }
        }

        #[test]
        fn signal_coefficient_decreases_along_sequence(n in 1usize..100, quadratic: bool) {
            let s = linear_schedule(100, 1e-4, 0.02).unwrap();
            let spacing = if quadratic { StepSpacing::Quadratic } else { StepSpacing::Uniform };
            let seq = spacing.steps(100, n).unwrap();
            prop_assert_eq!(seq.len(), n);
            prop_assert_eq!(*seq.last().unwrap(), 100);
            for w in seq.windows(2) {
                prop_assert!(s.alpha_bar(w[1]).sqrt() < s.alpha_bar(w[0]).sqrt());
            }
        }
    }
}
