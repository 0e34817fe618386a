//! Skew-normal fitting for descriptor populations.

use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::error::{invalid, Result};

/// Skew-normal parameters: shape, location and scale, plus the third
/// standardized moment of the fitted density.
///
/// `shape` is the usual slant parameter (unbounded). `skewness` is the
/// moment coefficient it implies, which stays in (-0.996, 0.996) and is far
/// better conditioned near symmetry, where the shape estimate is unstable.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkewNormalFit {
    pub shape: f64,
    pub skewness: f64,
    pub location: f64,
    pub scale: f64,
}

/// Third standardized moment of a skew-normal with the given shape.
pub fn skew_normal_skewness(shape: f64) -> f64 {
    let delta = shape / (1.0 + shape * shape).sqrt();
    let m = delta * (2.0 / PI).sqrt();
    (4.0 - PI) / 2.0 * m.powi(3) / (1.0 - m * m).powf(1.5)
}

/// Equal-width histogram over `[min(0, min), max]`: bin centres and counts.
pub fn histogram(values: &[f64], bins: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    if values.is_empty() || bins == 0 {
        return invalid!("histogram needs values and at least one bin");
    }
    if values.iter().any(|v| !v.is_finite()) {
        return invalid!("histogram values must be finite");
    }
    if values.iter().all(|&v| v == values[0]) {
        return invalid!("degenerate population: all values equal");
    }
    let lo = values.iter().cloned().fold(0.0f64, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return invalid!("degenerate population: all values equal");
    }
    let width = (hi - lo) / bins as f64;
    let mut counts = vec![0.0; bins];
    for &v in values {
        let b = (((v - lo) / width) as usize).min(bins - 1);
        counts[b] += 1.0;
    }
    let centres = (0..bins).map(|b| lo + (b as f64 + 0.5) * width).collect();
    Ok((centres, counts))
}

/// Log-density of the skew-normal distribution.
pub fn skew_normal_ln_pdf(x: f64, shape: f64, loc: f64, scale: f64) -> f64 {
    let z = (x - loc) / scale;
    std::f64::consts::LN_2 - scale.ln() - 0.5 * (2.0 * PI).ln() - 0.5 * z * z
        + ln_norm_cdf(shape * z)
}

/// `ln Phi(x)` without underflow in the far left tail.
fn ln_norm_cdf(x: f64) -> f64 {
    if x > -30.0 {
        (0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)).ln()
    } else {
        // Mills-ratio asymptote
        -0.5 * x * x - (-x).ln() - 0.5 * (2.0 * PI).ln()
    }
}

const MAX_SHAPE: f64 = 1e3;

/// Maximum-likelihood skew-normal fit to a histogram of `values`.
///
/// The likelihood is evaluated at bin centres weighted by bin counts, which
/// makes the fit exactly equivariant under rescaling of the population.
pub fn fit_skew_normal(values: &[f64], bins: usize) -> Result<SkewNormalFit> {
    let (centres, counts) = histogram(values, bins)?;
    let total: f64 = counts.iter().sum();
    let mean = centres.iter().zip(&counts).map(|(c, w)| c * w).sum::<f64>() / total;
    let m2 = centres
        .iter()
        .zip(&counts)
        .map(|(c, w)| w * (c - mean).powi(2))
        .sum::<f64>()
        / total;
    let m3 = centres
        .iter()
        .zip(&counts)
        .map(|(c, w)| w * (c - mean).powi(3))
        .sum::<f64>()
        / total;
    let sd = m2.sqrt();
    if !(sd > 0.0) {
        return invalid!("degenerate population: zero spread");
    }

    // method-of-moments start, with the sample skewness clipped to the
    // range the family can represent
    let gamma = (m3 / sd.powi(3)).clamp(-0.99, 0.99);
    let g23 = gamma.abs().powf(2.0 / 3.0);
    let c = ((4.0 - PI) / 2.0).powf(2.0 / 3.0);
    let delta = gamma.signum() * (PI / 2.0 * g23 / (g23 + c)).sqrt();
    let shape0 = delta / (1.0 - delta * delta).max(1e-6).sqrt();
    let scale0 = sd / (1.0 - 2.0 * delta * delta / PI).sqrt();
    let loc0 = mean - scale0 * delta * (2.0 / PI).sqrt();

    // optimise in units of the sample spread for conditioning
    let nll = |p: &[f64; 3]| -> f64 {
        let shape = p[0].clamp(-MAX_SHAPE, MAX_SHAPE);
        let loc = mean + p[1] * sd;
        let scale = sd * p[2].exp();
        -centres
            .iter()
            .zip(&counts)
            .filter(|(_, w)| **w > 0.0)
            .map(|(x, w)| w * skew_normal_ln_pdf(*x, shape, loc, scale))
            .sum::<f64>()
            / total
    };
    let start = [shape0, (loc0 - mean) / sd, (scale0 / sd).ln()];
    let mut best = nelder_mead(&nll, start, [0.5, 0.2, 0.2], 4000, 1e-13);
    // restart once from the optimum to escape premature simplex collapse
    best = nelder_mead(&nll, best, [0.25, 0.05, 0.05], 4000, 1e-14);
    let shape = best[0].clamp(-MAX_SHAPE, MAX_SHAPE);
    Ok(SkewNormalFit {
        shape,
        skewness: skew_normal_skewness(shape),
        location: mean + best[1] * sd,
        scale: sd * best[2].exp(),
    })
}

/// Minimise `f` with the Nelder-Mead simplex method.
fn nelder_mead(
    f: &impl Fn(&[f64; 3]) -> f64,
    start: [f64; 3],
    step: [f64; 3],
    max_iter: usize,
    ftol: f64,
) -> [f64; 3] {
    let mut simplex: Vec<([f64; 3], f64)> = Vec::with_capacity(4);
    simplex.push((start, f(&start)));
    for i in 0..3 {
        let mut p = start;
        p[i] += step[i];
        simplex.push((p, f(&p)));
    }
    let blend = |a: &[f64; 3], b: &[f64; 3], t: f64| -> [f64; 3] {
        [
            a[0] + t * (b[0] - a[0]),
            a[1] + t * (b[1] - a[1]),
            a[2] + t * (b[2] - a[2]),
        ]
    };
    for _ in 0..max_iter {
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        if (simplex[3].1 - simplex[0].1).abs() <= ftol * (1.0 + simplex[0].1.abs()) {
            break;
        }
        let mut centroid = [0.0; 3];
        for (p, _) in &simplex[..3] {
            for k in 0..3 {
                centroid[k] += p[k] / 3.0;
            }
        }
        let worst = simplex[3];
        let reflected = blend(&centroid, &worst.0, -1.0);
        let fr = f(&reflected);
        if fr < simplex[0].1 {
            let expanded = blend(&centroid, &worst.0, -2.0);
            let fe = f(&expanded);
            simplex[3] = if fe < fr { (expanded, fe) } else { (reflected, fr) };
        } else if fr < simplex[2].1 {
            simplex[3] = (reflected, fr);
        } else {
            let contracted = if fr < worst.1 {
                blend(&centroid, &reflected, 0.5)
            } else {
                blend(&centroid, &worst.0, 0.5)
            };
            let fc = f(&contracted);
            if fc < worst.1.min(fr) {
                simplex[3] = (contracted, fc);
            } else {
                let best = simplex[0].0;
                for entry in simplex.iter_mut().skip(1) {
                    let p = blend(&best, &entry.0, 0.5);
                    *entry = (p, f(&p));
                }
            }
        }
    }
    simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
    simplex[0].0
}
