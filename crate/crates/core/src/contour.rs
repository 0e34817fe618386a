//! Phase-boundary tracing and Fourier shape descriptors for 2D
//! microstructures.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::microstructure::Microstructure;
use crate::stats::{fit_skew_normal, SkewNormalFit};

/// Shortest contour kept by [`trace_boundaries`].
pub const MIN_CONTOUR_LEN: usize = 4;

/// Histogram resolution used when fitting descriptor magnitude populations.
pub const HISTOGRAM_BINS: usize = 64;

// Clockwise Moore neighbourhood in image coordinates (y grows downwards),
// starting at west.
const MOORE: [(i64, i64); 8] = [
    (-1, 0),
    (-1, -1),
    (0, -1),
    (1, -1),
    (1, 0),
    (1, 1),
    (0, 1),
    (-1, 1),
];

/// A closed boundary as an ordered list of pixel coordinates `(x, y)`.
/// The last point is adjacent to the first; it is not repeated.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Contour {
    pub points: Vec<(i64, i64)>,
}

impl Contour {
    /// Boundary as the complex sequence `x + j y`.
    pub fn to_complex(&self) -> Vec<Complex<f64>> {
        self.points
            .iter()
            .map(|&(x, y)| Complex::new(x as f64, y as f64))
            .collect()
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Consecutive points (cyclically) are distinct 8-neighbours.
    pub fn is_closed_chain(&self) -> bool {
        let n = self.points.len();
        n >= MIN_CONTOUR_LEN
            && (0..n).all(|i| {
                let (a, b) = (self.points[i], self.points[(i + 1) % n]);
                let (dx, dy) = ((a.0 - b.0).abs(), (a.1 - b.1).abs());
                dx <= 1 && dy <= 1 && (dx, dy) != (0, 0)
            })
    }
}

/// Trace every boundary of the phase-1 regions of a 2D microstructure.
///
/// Uses Moore-neighbour tracing with Jacob's stopping criterion over
/// 8-connected regions. Starting pixels are discovered in scanline order:
/// a phase-1 pixel with background (or the image edge) on its left that is
/// not yet on a traced contour. Outer boundaries and hole boundaries are
/// both reported; contours shorter than [`MIN_CONTOUR_LEN`] are dropped.
pub fn trace_boundaries(ms: &Microstructure) -> Result<Vec<Contour>> {
    if ms.dims() != 2 {
        return invalid!("boundary tracing needs a 2D microstructure, got {}D", ms.dims());
    }
    if ms.phases().iter().all(|&p| p == ms.phases()[0]) {
        // no phase boundary in a uniform image
        return Ok(Vec::new());
    }
    let (w, h) = (ms.shape()[0] as i64, ms.shape()[1] as i64);
    let inside = |x: i64, y: i64| -> bool {
        x >= 0 && y >= 0 && x < w && y < h && ms.phases()[(x + y * w) as usize] == 1
    };
    let mut on_contour = vec![false; ms.len()];
    let mut contours = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if !inside(x, y) || inside(x - 1, y) || on_contour[(x + y * w) as usize] {
                continue;
            }
            let points = trace_from((x, y), &inside, (w * h) as usize);
            for &(px, py) in &points {
                on_contour[(px + py * w) as usize] = true;
            }
            if points.len() >= MIN_CONTOUR_LEN {
                contours.push(Contour { points });
            }
        }
    }
    Ok(contours)
}

fn trace_from(
    start: (i64, i64),
    inside: &impl Fn(i64, i64) -> bool,
    cells: usize,
) -> Vec<(i64, i64)> {
    // backtrack neighbour as an index into MOORE relative to the current pixel
    const WEST: usize = 0;
    let start_back = (start.0 - 1, start.1);
    let mut points = vec![start];
    let mut cur = start;
    let mut back = WEST;
    // every boundary pixel can be entered from at most 8 directions
    let limit = 8 * cells + 8;
    for _ in 0..limit {
        let mut next = None;
        for i in 1..=8 {
            let k = (back + i) % 8;
            let cand = (cur.0 + MOORE[k].0, cur.1 + MOORE[k].1);
            if inside(cand.0, cand.1) {
                let prev = (back + i - 1) % 8;
                let b_abs = (cur.0 + MOORE[prev].0, cur.1 + MOORE[prev].1);
                next = Some((cand, b_abs));
                break;
            }
        }
        let Some((cand, b_abs)) = next else {
            // isolated pixel
            return points;
        };
        let offset = (b_abs.0 - cand.0, b_abs.1 - cand.1);
        back = MOORE
            .iter()
            .position(|&d| d == offset)
            .expect("backtrack pixel is a Moore neighbour");
        cur = cand;
        if cur == start && b_abs == start_back {
            break;
        }
        points.push(cur);
    }
    points
}

/// Discrete Fourier transform of a closed boundary.
#[derive(Clone, Debug, PartialEq)]
pub struct FourierDescriptor {
    pub coefficients: Vec<Complex<f64>>,
}

impl FourierDescriptor {
    /// Magnitudes of the non-DC coefficients `|a(u)|`, `u >= 1`.
    pub fn harmonic_magnitudes(&self) -> Vec<f64> {
        self.coefficients.iter().skip(1).map(|c| c.norm()).collect()
    }

    /// Inverse transform (with the 1/K factor) back to the boundary sequence.
    pub fn inverse(&self) -> Vec<Complex<f64>> {
        let k = self.coefficients.len();
        let mut buf = self.coefficients.clone();
        if k > 0 {
            FftPlanner::new().plan_fft_inverse(k).process(&mut buf);
        }
        buf.iter().map(|c| c / k as f64).collect()
    }
}

/// `a(u) = sum_k s(k) exp(-j 2 pi u k / K)`, unnormalized.
pub fn fourier_descriptor(c: &Contour) -> FourierDescriptor {
    fourier_descriptor_of(&c.to_complex())
}

/// Descriptor of an arbitrary complex boundary sequence.
pub fn fourier_descriptor_of(sequence: &[Complex<f64>]) -> FourierDescriptor {
    let mut buf = sequence.to_vec();
    if !buf.is_empty() {
        FftPlanner::new()
            .plan_fft_forward(buf.len())
            .process(&mut buf);
    }
    FourierDescriptor { coefficients: buf }
}

/// Pool the non-DC magnitudes of a descriptor population.
pub fn pooled_magnitudes(descs: &[FourierDescriptor]) -> Vec<f64> {
    descs.iter().flat_map(|d| d.harmonic_magnitudes()).collect()
}

/// Skew-normal fit to the pooled magnitude histogram of a population.
pub fn descriptor_population_stats(descs: &[FourierDescriptor]) -> Result<SkewNormalFit> {
    if descs.is_empty() {
        return invalid!("descriptor population is empty");
    }
    let pooled = pooled_magnitudes(descs);
    fit_skew_normal(&pooled, HISTOGRAM_BINS)
}
