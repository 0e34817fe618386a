//! Spatial correlation statistics of binary microstructures.
//!
//! Both statistics are estimated along the axis-aligned lattice directions
//! and averaged with equal weight per axis. Periodic microstructures wrap at
//! the edges; otherwise only in-domain pairs/segments are counted and each
//! separation is normalized by its own count.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::microstructure::Microstructure;
use crate::par;

/// A radial statistic sampled at integer separations `0..=r_max`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DescriptorCurve {
    pub r: Vec<usize>,
    pub value: Vec<f64>,
}

impl DescriptorCurve {
    fn from_values(value: Vec<f64>) -> Self {
        Self {
            r: (0..value.len()).collect(),
            value,
        }
    }

    /// Mean absolute difference over the common range `r <= r_max`.
    pub fn mean_abs_diff(&self, other: &Self, r_max: usize) -> f64 {
        let n = (r_max + 1).min(self.value.len()).min(other.value.len());
        self.value[..n]
            .iter()
            .zip(&other.value[..n])
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / n as f64
    }

    /// Pointwise average of several curves of equal length.
    pub fn average(curves: &[DescriptorCurve]) -> Result<Self> {
        let Some(first) = curves.first() else {
            return invalid!("cannot average an empty set of curves");
        };
        if curves.iter().any(|c| c.value.len() != first.value.len()) {
            return invalid!("curves have different lengths");
        }
        let n = curves.len() as f64;
        let value = (0..first.value.len())
            .map(|i| curves.iter().map(|c| c.value[i]).sum::<f64>() / n)
            .collect();
        Ok(Self::from_values(value))
    }
}

pub fn volume_fraction(ms: &Microstructure) -> f64 {
    ms.volume_fraction()
}

fn check_r_max(ms: &Microstructure, r_max: usize) -> Result<()> {
    if r_max >= ms.min_extent() {
        return invalid!(
            "r_max = {r_max} must be below the smallest extent {}",
            ms.min_extent()
        );
    }
    Ok(())
}

/// Brute-force two-point correlation S2(r), averaged over axes.
pub fn two_point_correlation(ms: &Microstructure, r_max: usize) -> Result<DescriptorCurve> {
    check_r_max(ms, r_max)?;
    let per_axis: Vec<Vec<f64>> =
        par::map_range(ms.dims(), |axis| s2_axis_values(ms, axis, r_max));
    Ok(average_axes(&per_axis))
}

/// Brute-force S2 along a single axis.
pub fn two_point_correlation_axis(
    ms: &Microstructure,
    axis: usize,
    r_max: usize,
) -> Result<DescriptorCurve> {
    check_axis(ms, axis)?;
    check_r_max(ms, r_max)?;
    Ok(DescriptorCurve::from_values(s2_axis_values(ms, axis, r_max)))
}

fn check_axis(ms: &Microstructure, axis: usize) -> Result<()> {
    if axis >= ms.dims() {
        return invalid!("axis {axis} out of range for a {}D microstructure", ms.dims());
    }
    Ok(())
}

fn average_axes(per_axis: &[Vec<f64>]) -> DescriptorCurve {
    let n = per_axis.len() as f64;
    let value = (0..per_axis[0].len())
        .map(|r| per_axis.iter().map(|v| v[r]).sum::<f64>() / n)
        .collect();
    DescriptorCurve::from_values(value)
}

fn s2_axis_values(ms: &Microstructure, axis: usize, r_max: usize) -> Vec<f64> {
    let shape = ms.shape();
    let len = shape[axis];
    let stride = ms.stride(axis);
    let phase = ms.phases();
    (0..=r_max)
        .map(|r| {
            let mut hits = 0usize;
            let mut pairs = 0usize;
            for (idx, &p) in phase.iter().enumerate() {
                let c = (idx / stride) % len;
                let target = if c + r < len {
                    idx + r * stride
                } else if ms.periodic {
                    idx + r * stride - len * stride
                } else {
                    continue;
                };
                pairs += 1;
                hits += (p & phase[target]) as usize;
            }
            hits as f64 / pairs as f64
        })
        .collect()
}

/// S2 via spectral autocorrelation. Requires a periodic microstructure.
pub fn s2_fft(ms: &Microstructure, r_max: usize) -> Result<DescriptorCurve> {
    if !ms.periodic {
        return invalid!("the FFT estimator requires a periodic microstructure");
    }
    check_r_max(ms, r_max)?;
    let shape = ms.shape();
    let n = ms.len();
    let mut buf: Vec<Complex<f64>> = ms
        .phases()
        .iter()
        .map(|&p| Complex::new(p as f64, 0.0))
        .collect();
    let mut planner = FftPlanner::new();
    fft_nd(&mut buf, shape, &mut planner, false);
    for v in buf.iter_mut() {
        *v = Complex::new(v.norm_sqr(), 0.0);
    }
    fft_nd(&mut buf, shape, &mut planner, true);
    let norm = (n * n) as f64;
    let per_axis: Vec<Vec<f64>> = (0..ms.dims())
        .map(|axis| {
            let stride = ms.stride(axis);
            (0..=r_max).map(|r| buf[r * stride].re / norm).collect()
        })
        .collect();
    Ok(average_axes(&per_axis))
}

/// Unnormalized in-place FFT over every axis of an x-fastest buffer.
fn fft_nd(buf: &mut [Complex<f64>], shape: &[usize], planner: &mut FftPlanner<f64>, inverse: bool) {
    let total = buf.len();
    let mut stride = 1;
    for &len in shape {
        let fft = if inverse {
            planner.plan_fft_inverse(len)
        } else {
            planner.plan_fft_forward(len)
        };
        let mut line = vec![Complex::new(0.0, 0.0); len];
        let block = stride * len;
        for outer in (0..total).step_by(block) {
            for inner in 0..stride {
                let base = outer + inner;
                for (k, v) in line.iter_mut().enumerate() {
                    *v = buf[base + k * stride];
                }
                fft.process(&mut line);
                for (k, v) in line.iter().enumerate() {
                    buf[base + k * stride] = *v;
                }
            }
        }
        stride *= len;
    }
}

/// Lineal-path function L(r): probability that `r + 1` consecutive cells
/// along an axis all lie in phase 1, averaged over axes.
pub fn lineal_path(ms: &Microstructure, r_max: usize) -> Result<DescriptorCurve> {
    check_r_max(ms, r_max)?;
    let per_axis: Vec<Vec<f64>> =
        par::map_range(ms.dims(), |axis| lineal_axis_values(ms, axis, r_max));
    Ok(average_axes(&per_axis))
}

/// Lineal path along a single axis.
pub fn lineal_path_axis(ms: &Microstructure, axis: usize, r_max: usize) -> Result<DescriptorCurve> {
    check_axis(ms, axis)?;
    check_r_max(ms, r_max)?;
    Ok(DescriptorCurve::from_values(lineal_axis_values(
        ms, axis, r_max,
    )))
}

fn lineal_axis_values(ms: &Microstructure, axis: usize, r_max: usize) -> Vec<f64> {
    let shape = ms.shape();
    let len = shape[axis];
    let stride = ms.stride(axis);
    let phase = ms.phases();
    // runs[k] = number of starting cells whose forward run of phase-1 cells
    // has length exactly k (k = len means "at least len")
    let mut runs = vec![0usize; len + 1];
    let mut run_at = vec![0usize; len];
    let block = stride * len;
    for outer in (0..ms.len()).step_by(block) {
        for inner in 0..stride {
            let base = outer + inner;
            let cell = |k: usize| phase[base + k * stride];
            let mut next = 0usize;
            let passes = if ms.periodic { 2 } else { 1 };
            for pass in 0..passes {
                for k in (0..len).rev() {
                    next = if cell(k) == 1 { (next + 1).min(len) } else { 0 };
                    if pass + 1 == passes {
                        run_at[k] = next;
                    }
                }
            }
            for &r in &run_at {
                runs[r] += 1;
            }
        }
    }
    // at_least[k] = number of starts with run >= k
    let mut at_least = vec![0usize; len + 2];
    for k in (0..=len).rev() {
        at_least[k] = at_least[k + 1] + runs[k];
    }
    let lines = ms.len() / len;
    (0..=r_max)
        .map(|r| {
            let starts = if ms.periodic {
                ms.len()
            } else {
                lines * (len - r)
            };
            at_least[r + 1] as f64 / starts as f64
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_ms(shape: &[usize], p: f64, periodic: bool, seed: u64) -> Microstructure {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        let phase = (0..n).map(|_| u8::from(rng.random_bool(p))).collect();
        Microstructure::new(shape, phase, periodic).unwrap()
    }

    /// Independent pair enumeration over explicit coordinates.
    fn s2_enumerate(ms: &Microstructure, r_max: usize) -> Vec<f64> {
        let shape = ms.shape().to_vec();
        let dims = shape.len();
        let mut out = vec![0.0; r_max + 1];
        for (r, o) in out.iter_mut().enumerate() {
            let mut acc = 0.0;
            for axis in 0..dims {
                let (mut hit, mut cnt) = (0.0, 0.0);
                let n: usize = shape.iter().product();
                let mut c = vec![0; dims];
                for idx in 0..n {
                    crate::microstructure::unravel(idx, &shape, &mut c);
                    let mut d = c.clone();
                    d[axis] += r;
                    if d[axis] >= shape[axis] {
                        if !ms.periodic {
                            continue;
                        }
                        d[axis] %= shape[axis];
                    }
                    cnt += 1.0;
                    if ms.get(&c) == 1 && ms.get(&d) == 1 {
                        hit += 1.0;
                    }
                }
                acc += hit / cnt;
            }
            *o = acc / dims as f64;
        }
        out
    }

    fn chessboard(n: usize, cell: usize) -> Microstructure {
        Microstructure::from_fn(&[n, n], true, |c| (c[0] / cell + c[1] / cell) % 2 == 1).unwrap()
    }

    #[test]
    fn volume_fraction_cases() {
        let ones = Microstructure::filled(&[8, 8], 1, true).unwrap();
        assert_eq!(volume_fraction(&ones), 1.0);
        assert_eq!(volume_fraction(&chessboard(64, 32)), 0.5);
        let ms = random_ms(&[20, 17], 0.3, false, 2);
        let s2 = two_point_correlation(&ms, 5).unwrap();
        assert_eq!(s2.value[0], volume_fraction(&ms));
    }

    #[test]
    fn uniform_grids() {
        let ones = Microstructure::filled(&[16, 16], 1, false).unwrap();
        assert!(two_point_correlation(&ones, 15).unwrap().value.iter().all(|&v| v == 1.0));
        assert!(lineal_path(&ones, 15).unwrap().value.iter().all(|&v| v == 1.0));
        let ones_p = Microstructure::filled(&[16, 16], 1, true).unwrap();
        assert!(lineal_path(&ones_p, 15).unwrap().value.iter().all(|&v| v == 1.0));
        let zeros = Microstructure::filled(&[16, 16], 0, true).unwrap();
        assert!(s2_fft(&zeros, 15).unwrap().value.iter().all(|&v| v.abs() < 1e-12));
    }

    #[test]
    fn one_pixel_chessboard() {
        let ms = chessboard(16, 1);
        let s2 = two_point_correlation(&ms, 4).unwrap();
        assert_eq!(s2.value[1], 0.0);
        assert_eq!(s2.value[2], 0.5);
        let f = s2_fft(&ms, 4).unwrap();
        for (a, b) in f.value.iter().zip(&s2.value) {
            assert!((a - b).abs() < 1e-9);
        }
        assert_eq!(s2.value, s2_enumerate(&ms, 4));
    }

    #[test]
    fn rejects_large_r_and_nonperiodic_fft() {
        let ms = random_ms(&[8, 8], 0.5, false, 1);
        assert!(two_point_correlation(&ms, 8).is_err());
        assert!(lineal_path(&ms, 8).is_err());
        assert!(s2_fft(&ms, 3).is_err());
    }

    #[test]
    fn stripe_lineal_path() {
        let ms = Microstructure::from_fn(&[64, 1], false, |c| (20..30).contains(&c[0])).unwrap();
        let l = lineal_path_axis(&ms, 0, 0).unwrap();
        assert!((l.value[0] - 10.0 / 64.0).abs() < 1e-15);
        let ms = Microstructure::from_fn(&[64, 64], false, |c| (20..30).contains(&c[0])).unwrap();
        let l = lineal_path_axis(&ms, 0, 63).unwrap();
        for r in 0..64 {
            let expected = (10.0 - r as f64).max(0.0) / (64.0 - r as f64);
            assert!((l.value[r] - expected).abs() < 1e-12, "r = {r}");
        }
    }

    #[test]
    fn brute_force_matches_enumeration_3d() {
        for periodic in [false, true] {
            let ms = random_ms(&[6, 5, 7], 0.4, periodic, 9);
            let s2 = two_point_correlation(&ms, 4).unwrap();
            let e = s2_enumerate(&ms, 4);
            for (a, b) in s2.value.iter().zip(&e) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn average_and_gap() {
        let a = DescriptorCurve::from_values(vec![0.5, 0.3]);
        let b = DescriptorCurve::from_values(vec![0.3, 0.1]);
        let m = DescriptorCurve::average(&[a.clone(), b.clone()]).unwrap();
        assert!((m.value[0] - 0.4).abs() < 1e-15);
        assert!((a.mean_abs_diff(&b, 10) - 0.2).abs() < 1e-12);
        assert!(DescriptorCurve::average(&[]).is_err());
    }

    proptest! {
        #[test]
        fn fft_matches_brute_force(seed in 0u64..10_000, p in 0.05f64..0.95, nx in 2usize..20, ny in 2usize..20) {
            let ms = random_ms(&[nx, ny], p, true, seed);
            let r_max = nx.min(ny) - 1;
            let a = two_point_correlation(&ms, r_max).unwrap();
            let b = s2_fft(&ms, r_max).unwrap();
            for (x, y) in a.value.iter().zip(&b.value) {
                prop_assert!((x - y).abs() < 1e-9);
            }
        }

        #[test]
        fn lineal_path_bounds(seed in 0u64..10_000, p in 0.05f64..0.95, periodic in any::<bool>()) {
            let ms = random_ms(&[12, 9, 5], p, periodic, seed);
            let l = lineal_path(&ms, 4).unwrap();
            let s2 = two_point_correlation(&ms, 4).unwrap();
            prop_assert!((l.value[0] - ms.volume_fraction()).abs() < 1e-15);
            for r in 0..=4 {
                prop_assert!(l.value[r] <= s2.value[r] + 1e-15);
                if r > 0 {
                    prop_assert!(l.value[r] <= l.value[r - 1]);
                }
            }
        }

        #[test]
        fn phase_complement_identity(seed in 0u64..10_000, p in 0.05f64..0.95) {
            let ms = random_ms(&[16, 16], p, true, seed);
            let phi = ms.volume_fraction();
            let s = two_point_correlation(&ms, 8).unwrap();
            let c = two_point_correlation(&ms.complement(), 8).unwrap();
            for r in 0..=8 {
                prop_assert!((c.value[r] - (1.0 - 2.0 * phi + s.value[r])).abs() < 1e-9);
                prop_assert!(s.value[r] <= phi + 1e-12);
                prop_assert!(s.value[r] >= (2.0 * phi - 1.0).max(0.0) - 1e-12);
            }
        }
    }
}
