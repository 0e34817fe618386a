//! Procedural two-phase microstructure generators.
//!
//! Every generator is a pure function of its [`GenSpec`]; the seed fully
//! determines the output.

use std::collections::VecDeque;
use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::microstructure::{ravel, unravel, Microstructure};
use crate::par;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GeneratorKind {
    /// Non-overlapping disks (2D) or spheres (3D).
    Inclusions,
    /// Non-overlapping randomly oriented ellipses / prolate spheroids.
    Fibers,
    Chessboard,
    Voronoi,
    /// Thresholded random harmonic field with an isotropic Gaussian spectrum.
    Harmonic,
    /// Harmonic field with a narrow-band (ring/shell) spectrum.
    Spinodal,
    /// Harmonic field with an axis-scaled spectrum.
    Texture,
    FractalNoise,
}

impl std::str::FromStr for GeneratorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| Error::Invalid(format!("unknown generator kind '{s}'")))
    }
}

/// Generator settings. Fields irrelevant to `kind` are ignored.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenSpec {
    pub kind: GeneratorKind,
    pub shape: Vec<usize>,
    pub target_fraction: f64,
    pub periodic: bool,
    pub seed: u64,
    /// Inclusion radius range (cells). For fibers this is the minor semi-axis.
    pub radius_min: f64,
    pub radius_max: f64,
    /// Fiber major/minor semi-axis ratio.
    pub aspect_ratio: f64,
    /// Chessboard cell edge, or the base lattice spacing of fractal noise.
    pub cell_size: usize,
    pub sites: usize,
    pub octaves: usize,
    pub correlation_length: f64,
    /// Per-axis stretch of the texture correlation length.
    pub anisotropy: Vec<f64>,
    pub harmonics: usize,
    /// Consecutive rejected placements tolerated before giving up.
    pub max_attempts: usize,
}

impl Default for GenSpec {
    fn default() -> Self {
        Self {
            kind: GeneratorKind::Inclusions,
            shape: vec![64, 64],
            target_fraction: 0.3,
            periodic: true,
            seed: 0,
            radius_min: 4.0,
            radius_max: 6.0,
            aspect_ratio: 4.0,
            cell_size: 8,
            sites: 24,
            octaves: 4,
            correlation_length: 4.0,
            anisotropy: vec![4.0, 1.0, 1.0],
            harmonics: 128,
            max_attempts: 20_000,
        }
    }
}

impl GenSpec {
    pub fn new(kind: GeneratorKind, shape: &[usize]) -> Self {
        Self {
            kind,
            shape: shape.to_vec(),
            ..Self::default()
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_fraction(mut self, f: f64) -> Self {
        self.target_fraction = f;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(2..=3).contains(&self.shape.len()) || self.shape.contains(&0) {
            return invalid!("shape must be 2D or 3D with positive extents, got {:?}", self.shape);
        }
        let uses_fraction = !matches!(self.kind, GeneratorKind::Chessboard);
        if uses_fraction && !(self.target_fraction > 0.0 && self.target_fraction < 1.0) {
            return invalid!("target fraction must lie in (0, 1), got {}", self.target_fraction);
        }
        match self.kind {
            GeneratorKind::Inclusions | GeneratorKind::Fibers => {
                if !(self.radius_min > 0.0 && self.radius_min <= self.radius_max) {
                    return invalid!(
                        "need 0 < radius_min <= radius_max, got {}..{}",
                        self.radius_min,
                        self.radius_max
                    );
                }
                if self.kind == GeneratorKind::Inclusions && self.target_fraction >= 0.5 {
                    return invalid!("non-overlapping inclusions need target fraction < 0.5");
                }
                if self.kind == GeneratorKind::Fibers && self.aspect_ratio < 1.0 {
                    return invalid!("aspect ratio must be >= 1");
                }
            }
            GeneratorKind::Chessboard => {
                if self.cell_size == 0 || self.shape.iter().any(|e| e % self.cell_size != 0) {
                    return invalid!(
                        "cell size {} must divide every extent of {:?}",
                        self.cell_size,
                        self.shape
                    );
                }
                let cells: usize = self.shape.iter().map(|e| e / self.cell_size).product();
                if !cells.is_multiple_of(2) {
                    return invalid!(
                        "cell size {} gives an odd number of cells; phases cannot split evenly",
                        self.cell_size
                    );
                }
            }
            GeneratorKind::Voronoi => {
                if self.sites < 2 {
                    return invalid!("voronoi needs at least 2 sites");
                }
            }
            GeneratorKind::Harmonic | GeneratorKind::Spinodal | GeneratorKind::Texture => {
                if !(self.correlation_length > 0.0) {
                    return invalid!("correlation length must be positive");
                }
                if self.harmonics < 8 {
                    return invalid!("at least 8 harmonics are required");
                }
                if self.kind == GeneratorKind::Texture
                    && (self.anisotropy.len() < self.shape.len()
                        || self.anisotropy.iter().any(|a| !(*a > 0.0)))
                {
                    return invalid!("anisotropy needs a positive entry per axis");
                }
            }
            GeneratorKind::FractalNoise => {
                if self.octaves == 0 {
                    return invalid!("fractal noise needs at least one octave");
                }
                if self.cell_size == 0 {
                    return invalid!("fractal noise needs a positive base cell size");
                }
            }
        }
        Ok(())
    }
}

/// Run the generator selected by `spec.kind`.
pub fn generate(spec: &GenSpec) -> Result<Microstructure> {
    match spec.kind {
        GeneratorKind::Inclusions | GeneratorKind::Fibers => gen_inclusions(spec),
        GeneratorKind::Chessboard => gen_chessboard(spec),
        GeneratorKind::Voronoi => gen_voronoi(spec),
        GeneratorKind::Harmonic | GeneratorKind::Spinodal | GeneratorKind::Texture => {
            gen_harmonic_field(spec)
        }
        GeneratorKind::FractalNoise => gen_fractal_noise(spec),
    }
}

/// Per-sample seed derived from a dataset seed by a splittable counter.
pub fn derive_seed(base: u64, index: u64) -> u64 {
    splitmix64(base.wrapping_add(index.wrapping_mul(0x9E37_79B9_7F4A_7C15)))
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// One generated dataset item.
#[derive(Clone, Debug)]
pub struct Sample {
    pub seed: u64,
    pub microstructure: Microstructure,
}

/// Generate `count` samples with seeds `derive_seed(spec.seed, i)`.
pub fn generate_dataset(spec: &GenSpec, count: usize) -> Result<Vec<Sample>> {
    spec.validate()?;
    par::map_range(count, |i| {
        let seed = derive_seed(spec.seed, i as u64);
        let item = GenSpec {
            seed,
            ..spec.clone()
        };
        generate(&item).map(|microstructure| Sample {
            seed,
            microstructure,
        })
    })
    .into_iter()
    .collect()
}

/// A placed inclusion: centre, semi-axes and (for fibers) unit major axis.
#[derive(Clone, Debug, PartialEq)]
pub struct Inclusion {
    pub center: Vec<f64>,
    pub radius: f64,
    pub major: f64,
    pub axis: Vec<f64>,
}

/// Random sequential addition of non-overlapping inclusions.
pub fn gen_inclusions(spec: &GenSpec) -> Result<Microstructure> {
    place_inclusions(spec).map(|(ms, _)| ms)
}

/// As [`gen_inclusions`], also returning the placed inclusions.
pub fn place_inclusions(spec: &GenSpec) -> Result<(Microstructure, Vec<Inclusion>)> {
    spec.validate()?;
    if !matches!(spec.kind, GeneratorKind::Inclusions | GeneratorKind::Fibers) {
        return invalid!("place_inclusions needs an inclusion kind, got {:?}", spec.kind);
    }
    let fibers = spec.kind == GeneratorKind::Fibers;
    let shape = &spec.shape;
    let dims = shape.len();
    let n: usize = shape.iter().product();
    let target = (spec.target_fraction * n as f64).ceil() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut phase = vec![0u8; n];
    let mut filled = 0usize;
    let mut placed: Vec<Inclusion> = Vec::new();
    let mut failures = 0usize;
    let mut cells = Vec::new();
    while filled < target {
        if failures >= spec.max_attempts {
            return invalid!(
                "could not place another inclusion after {} attempts (fraction {:.3} of target {})",
                failures,
                filled as f64 / n as f64,
                spec.target_fraction
            );
        }
        let center: Vec<f64> = shape.iter().map(|&e| rng.random::<f64>() * e as f64).collect();
        let radius = if spec.radius_max > spec.radius_min {
            rng.random_range(spec.radius_min..spec.radius_max)
        } else {
            spec.radius_min
        };
        let (major, axis) = if fibers {
            (radius * spec.aspect_ratio, random_unit(dims, &mut rng))
        } else {
            (radius, unit_x(dims))
        };
        let inc = Inclusion {
            center,
            radius,
            major,
            axis,
        };
        if !fibers {
            let clash = placed.iter().any(|p| {
                let d2 = separation2(&p.center, &inc.center, shape, spec.periodic);
                d2 < (p.radius + inc.radius).powi(2)
            });
            if clash {
                failures += 1;
                continue;
            }
        }
        cells.clear();
        rasterize(&inc, shape, spec.periodic, &mut cells);
        if fibers && cells.iter().any(|&c| phase[c] == 1) {
            failures += 1;
            continue;
        }
        failures = 0;
        for &c in &cells {
            if phase[c] == 0 {
                phase[c] = 1;
                filled += 1;
            }
        }
        placed.push(inc);
    }
    let ms = Microstructure::new(shape, phase, spec.periodic)?;
    Ok((ms, placed))
}

fn unit_x(dims: usize) -> Vec<f64> {
    let mut v = vec![0.0; dims];
    v[0] = 1.0;
    v
}

fn random_unit<R: Rng>(dims: usize, rng: &mut R) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dims).map(|_| rng.sample(StandardNormal)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-9 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Squared centre separation, using the minimum image when periodic.
pub fn separation2(a: &[f64], b: &[f64], shape: &[usize], periodic: bool) -> f64 {
    a.iter()
        .zip(b)
        .zip(shape)
        .map(|((x, y), &e)| {
            let mut d = (x - y).abs();
            if periodic {
                d = d.min(e as f64 - d);
            }
            d * d
        })
        .sum()
}

/// Cells whose centres fall strictly inside the inclusion.
fn rasterize(inc: &Inclusion, shape: &[usize], periodic: bool, out: &mut Vec<usize>) {
    let dims = shape.len();
    let reach = inc.major.max(inc.radius);
    let lo: Vec<i64> = inc.center.iter().map(|c| (c - reach).floor() as i64 - 1).collect();
    let hi: Vec<i64> = inc.center.iter().map(|c| (c + reach).ceil() as i64 + 1).collect();
    let mut offs = lo.clone();
    let mut coord = vec![0usize; dims];
    'outer: loop {
        let d: Vec<f64> = offs
            .iter()
            .zip(&inc.center)
            .map(|(&o, c)| o as f64 + 0.5 - c)
            .collect();
        let along: f64 = d.iter().zip(&inc.axis).map(|(a, b)| a * b).sum();
        let r2: f64 = d.iter().map(|x| x * x).sum();
        let inside = (along * along) / (inc.major * inc.major)
            + (r2 - along * along).max(0.0) / (inc.radius * inc.radius)
            < 1.0;
        if inside {
            let mut ok = true;
            for k in 0..dims {
                let e = shape[k] as i64;
                let v = offs[k];
                if periodic {
                    coord[k] = v.rem_euclid(e) as usize;
                } else if v < 0 || v >= e {
                    ok = false;
                } else {
                    coord[k] = v as usize;
                }
            }
            if ok {
                let idx = ravel(&coord, shape);
                if !out.contains(&idx) {
                    out.push(idx);
                }
            }
        }
        for k in 0..dims {
            offs[k] += 1;
            if offs[k] <= hi[k] {
                continue 'outer;
            }
            offs[k] = lo[k];
        }
        break;
    }
}

/// Alternating cubic cells of edge `cell_size`.
pub fn gen_chessboard(spec: &GenSpec) -> Result<Microstructure> {
    spec.validate()?;
    let cs = spec.cell_size;
    Microstructure::from_fn(&spec.shape, spec.periodic, |c| {
        c.iter().map(|x| x / cs).sum::<usize>() % 2 == 1
    })
}

/// Nearest-site partition with cells labelled by greedy area assignment.
pub fn gen_voronoi(spec: &GenSpec) -> Result<Microstructure> {
    spec.validate()?;
    let owner = voronoi_partition(spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, u64::MAX));
    let mut area = vec![0usize; spec.sites];
    for &o in &owner {
        area[o] += 1;
    }
    let n = owner.len() as f64;
    let goal = spec.target_fraction * n;
    let mut order: Vec<usize> = (0..spec.sites).collect();
    order.shuffle(&mut rng);
    let mut labels = vec![false; spec.sites];
    let mut current = 0.0;
    for s in order {
        let next = current + area[s] as f64;
        if (next - goal).abs() < (current - goal).abs() {
            labels[s] = true;
            current = next;
        }
    }
    label_cells(&spec.shape, &owner, &labels, spec.periodic)
}

/// Phase map from a partition and a per-cell label.
pub fn label_cells(
    shape: &[usize],
    owner: &[usize],
    labels: &[bool],
    periodic: bool,
) -> Result<Microstructure> {
    if owner.iter().any(|&o| o >= labels.len()) {
        return invalid!("partition refers to a cell without a label");
    }
    let phase = owner.iter().map(|&o| u8::from(labels[o])).collect();
    Microstructure::new(shape, phase, periodic)
}

/// Assign every cell to its nearest site (minimum-image distance when
/// periodic). Fragments of a region that are not 4-connected to its main
/// body are merged into an adjacent region, so every region is connected.
pub fn voronoi_partition(spec: &GenSpec) -> Result<Vec<usize>> {
    spec.validate()?;
    let shape = &spec.shape;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let sites: Vec<Vec<f64>> = (0..spec.sites)
        .map(|_| shape.iter().map(|&e| rng.random::<f64>() * e as f64).collect())
        .collect();
    let n: usize = shape.iter().product();
    let mut owner: Vec<usize> = par::map_range(n, |idx| {
        let mut c = vec![0usize; shape.len()];
        unravel(idx, shape, &mut c);
        let p: Vec<f64> = c.iter().map(|&x| x as f64 + 0.5).collect();
        let mut best = (f64::INFINITY, 0);
        for (s, site) in sites.iter().enumerate() {
            let d = separation2(&p, site, shape, spec.periodic);
            if d < best.0 {
                best = (d, s);
            }
        }
        best.1
    });
    for _ in 0..16 {
        if !merge_fragments(&mut owner, shape, spec.periodic) {
            break;
        }
    }
    Ok(owner)
}

/// 4-neighbours (face neighbours in 3D) of a cell.
pub(crate) fn face_neighbours(idx: usize, shape: &[usize], periodic: bool, out: &mut Vec<usize>) {
    out.clear();
    let mut c = vec![0usize; shape.len()];
    unravel(idx, shape, &mut c);
    for k in 0..shape.len() {
        for step in [-1i64, 1] {
            let v = c[k] as i64 + step;
            let e = shape[k] as i64;
            let w = if periodic {
                v.rem_euclid(e)
            } else if v < 0 || v >= e {
                continue;
            } else {
                v
            };
            let mut d = c.clone();
            d[k] = w as usize;
            out.push(ravel(&d, shape));
        }
    }
}

/// Connected components of each region: returns a component id per cell.
pub(crate) fn region_components(owner: &[usize], shape: &[usize], periodic: bool) -> Vec<usize> {
    let n = owner.len();
    let mut comp = vec![usize::MAX; n];
    let mut next_id = 0;
    let mut queue = VecDeque::new();
    let mut nb = Vec::new();
    for start in 0..n {
        if comp[start] != usize::MAX {
            continue;
        }
        comp[start] = next_id;
        queue.push_back(start);
        while let Some(i) = queue.pop_front() {
            face_neighbours(i, shape, periodic, &mut nb);
            for &j in &nb {
                if comp[j] == usize::MAX && owner[j] == owner[i] {
                    comp[j] = next_id;
                    queue.push_back(j);
                }
            }
        }
        next_id += 1;
    }
    comp
}

fn merge_fragments(owner: &mut [usize], shape: &[usize], periodic: bool) -> bool {
    let comp = region_components(owner, shape, periodic);
    let ncomp = comp.iter().max().map_or(0, |m| m + 1);
    let mut size = vec![0usize; ncomp];
    let mut comp_owner = vec![0usize; ncomp];
    for (i, &c) in comp.iter().enumerate() {
        size[c] += 1;
        comp_owner[c] = owner[i];
    }
    // largest component per region is its main body
    let regions = owner.iter().max().map_or(0, |m| m + 1);
    let mut main = vec![usize::MAX; regions];
    for c in 0..ncomp {
        let r = comp_owner[c];
        if main[r] == usize::MAX || size[c] > size[main[r]] {
            main[r] = c;
        }
    }
    let mut changed = false;
    let mut nb = Vec::new();
    for i in 0..owner.len() {
        if main[comp_owner[comp[i]]] == comp[i] {
            continue;
        }
        face_neighbours(i, shape, periodic, &mut nb);
        if let Some(&j) = nb.iter().find(|&&j| comp[j] != comp[i]) {
            owner[i] = owner[j];
            changed = true;
        }
    }
    changed
}

/// Thresholded sum of random cosines.
pub fn gen_harmonic_field(spec: &GenSpec) -> Result<Microstructure> {
    spec.validate()?;
    let values = harmonic_field_values(spec)?;
    threshold_top(&spec.shape, &values, spec.target_fraction, spec.periodic)
}

/// The continuous random field behind [`gen_harmonic_field`].
pub fn harmonic_field_values(spec: &GenSpec) -> Result<Vec<f64>> {
    spec.validate()?;
    let shape = &spec.shape;
    let dims = shape.len();
    let ell = spec.correlation_length;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut waves: Vec<(Vec<f64>, f64)> = Vec::with_capacity(spec.harmonics);
    for _ in 0..spec.harmonics {
        let mut omega: Vec<f64> = match spec.kind {
            GeneratorKind::Harmonic => (0..dims)
                .map(|_| rng.sample::<f64, _>(StandardNormal) / ell)
                .collect(),
            GeneratorKind::Texture => (0..dims)
                .map(|k| rng.sample::<f64, _>(StandardNormal) / (ell * spec.anisotropy[k]))
                .collect(),
            GeneratorKind::Spinodal => {
                // shell of radius 2 pi / ell with 5% relative width
                let k0 = 2.0 * PI / ell * (1.0 + 0.05 * rng.sample::<f64, _>(StandardNormal));
                random_unit(dims, &mut rng).into_iter().map(|u| u * k0).collect()
            }
            other => return invalid!("{other:?} is not a harmonic-field kind"),
        };
        if spec.periodic {
            // snap to the reciprocal lattice so the field tiles the domain
            for (w, &e) in omega.iter_mut().zip(shape.iter()) {
                let q = 2.0 * PI / e as f64;
                *w = (*w / q).round() * q;
            }
            if omega.iter().all(|w| *w == 0.0) {
                let k = rng.random_range(0..dims);
                omega[k] = 2.0 * PI / shape[k] as f64;
            }
        }
        let phase = rng.random::<f64>() * 2.0 * PI;
        waves.push((omega, phase));
    }
    let n: usize = shape.iter().product();
    let amp = (2.0 / spec.harmonics as f64).sqrt();
    Ok(par::map_range(n, |idx| {
        let mut c = [0usize; 3];
        unravel(idx, shape, &mut c[..dims]);
        waves
            .iter()
            .map(|(w, ph)| {
                let arg: f64 = w.iter().zip(&c).map(|(a, &x)| a * x as f64).sum();
                (arg + ph).cos()
            })
            .sum::<f64>()
            * amp
    }))
}

/// Mark the `round(fraction * n)` largest values as phase 1 (ties by index).
pub fn threshold_top(
    shape: &[usize],
    values: &[f64],
    fraction: f64,
    periodic: bool,
) -> Result<Microstructure> {
    let n = values.len();
    let k = (fraction * n as f64).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    let mut phase = vec![0u8; n];
    for &i in &order[..k] {
        phase[i] = 1;
    }
    Microstructure::new(shape, phase, periodic)
}

/// Octave sum of value noise, thresholded to the target fraction.
pub fn gen_fractal_noise(spec: &GenSpec) -> Result<Microstructure> {
    spec.validate()?;
    let values = fractal_noise_values(spec)?;
    threshold_top(&spec.shape, &values, spec.target_fraction, spec.periodic)
}

/// The continuous field behind [`gen_fractal_noise`]: octave `o` has lattice
/// spacing `cell_size / 2^o` and amplitude `0.5^o`.
pub fn fractal_noise_values(spec: &GenSpec) -> Result<Vec<f64>> {
    spec.validate()?;
    let shape = &spec.shape;
    let dims = shape.len();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n: usize = shape.iter().product();
    let mut total = vec![0.0; n];
    for octave in 0..spec.octaves {
        let spacing = spec.cell_size as f64 / 2f64.powi(octave as i32);
        let amp = 0.5f64.powi(octave as i32);
        // lattice nodes per axis; periodic lattices wrap exactly
        let nodes: Vec<usize> = shape
            .iter()
            .map(|&e| {
                if spec.periodic {
                    ((e as f64 / spacing).round() as usize).max(1)
                } else {
                    (e as f64 / spacing).ceil() as usize + 2
                }
            })
            .collect();
        let step: Vec<f64> = shape
            .iter()
            .zip(&nodes)
            .map(|(&e, &m)| if spec.periodic { e as f64 / m as f64 } else { spacing })
            .collect();
        let lattice: Vec<f64> = (0..nodes.iter().product::<usize>())
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let layer = par::map_range(n, |idx| {
            let mut c = [0usize; 3];
            unravel(idx, shape, &mut c[..dims]);
            let mut base = [0usize; 3];
            let mut frac = [0.0f64; 3];
            for k in 0..dims {
                let u = c[k] as f64 / step[k];
                let b = u.floor();
                base[k] = b as usize;
                let t = u - b;
                frac[k] = t * t * (3.0 - 2.0 * t);
            }
            let mut acc = 0.0;
            for corner in 0..(1usize << dims) {
                let mut w = 1.0;
                let mut node = [0usize; 3];
                for k in 0..dims {
                    let bit = (corner >> k) & 1;
                    w *= if bit == 1 { frac[k] } else { 1.0 - frac[k] };
                    node[k] = (base[k] + bit) % nodes[k];
                }
                acc += w * lattice[ravel(&node[..dims], &nodes)];
            }
            acc
        });
        for (t, v) in total.iter_mut().zip(layer) {
            *t += amp * v;
        }
    }
    Ok(total)
}
