//! BGK lattice-Boltzmann flow with Guo body forcing, half-way bounce-back and
//! Darcy permeability extraction.
//!
//! Distributions are stored node-major (`f[node * q + i]`). Each step collides
//! into a scratch buffer and then pulls from upstream neighbours, so node
//! updates are independent and run in parallel.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::microstructure::{unravel, Microstructure};
use crate::par;

const BOUNCE: usize = usize::MAX;
const NODE_CHUNK: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Lattice {
    D2Q9,
    D3Q19,
}

impl Lattice {
    pub fn for_dims(dims: usize) -> Result<Self> {
        match dims {
            2 => Ok(Lattice::D2Q9),
            3 => Ok(Lattice::D3Q19),
            d => invalid!("no lattice for {d} dimensions"),
        }
    }

    pub fn dims(self) -> usize {
        match self {
            Lattice::D2Q9 => 2,
            Lattice::D3Q19 => 3,
        }
    }

    pub fn velocities(self) -> &'static [[i32; 3]] {
        match self {
            Lattice::D2Q9 => &D2Q9_C,
            Lattice::D3Q19 => &D3Q19_C,
        }
    }

    pub fn weights(self) -> &'static [f64] {
        match self {
            Lattice::D2Q9 => &D2Q9_W,
            Lattice::D3Q19 => &D3Q19_W,
        }
    }

    pub fn q(self) -> usize {
        self.weights().len()
    }

    /// Index of the direction opposite to `i`.
    pub fn opposite(self, i: usize) -> usize {
        let c = self.velocities()[i];
        self.velocities()
            .iter()
            .position(|d| d[0] == -c[0] && d[1] == -c[1] && d[2] == -c[2])
            .expect("velocity sets are symmetric")
    }
}

const D2Q9_C: [[i32; 3]; 9] = [
    [0, 0, 0],
    [1, 0, 0],
    [0, 1, 0],
    [-1, 0, 0],
    [0, -1, 0],
    [1, 1, 0],
    [-1, 1, 0],
    [-1, -1, 0],
    [1, -1, 0],
];
const D2Q9_W: [f64; 9] = [
    4.0 / 9.0,
    1.0 / 9.0,
    1.0 / 9.0,
    1.0 / 9.0,
    1.0 / 9.0,
    1.0 / 36.0,
    1.0 / 36.0,
    1.0 / 36.0,
    1.0 / 36.0,
];

const D3Q19_C: [[i32; 3]; 19] = [
    [0, 0, 0],
    [1, 0, 0],
    [-1, 0, 0],
    [0, 1, 0],
    [0, -1, 0],
    [0, 0, 1],
    [0, 0, -1],
    [1, 1, 0],
    [-1, -1, 0],
    [1, -1, 0],
    [-1, 1, 0],
    [1, 0, 1],
    [-1, 0, -1],
    [1, 0, -1],
    [-1, 0, 1],
    [0, 1, 1],
    [0, -1, -1],
    [0, 1, -1],
    [0, -1, 1],
];
const D3Q19_W: [f64; 19] = [
    1.0 / 3.0,
    1.0 / 18.0,
    1.0 / 18.0,
    1.0 / 18.0,
    1.0 / 18.0,
    1.0 / 18.0,
    1.0 / 18.0,
    1.0 / 36.0,
    1.0 / 36.0,
    1.0 / 36.0,
    1.0 / 36.0,
    1.0 / 36.0,
    1.0 / 36.0,
    1.0 / 36.0,
    1.0 / 36.0,
    1.0 / 36.0,
    1.0 / 36.0,
    1.0 / 36.0,
    1.0 / 36.0,
];

/// Treatment of the two domain faces normal to an axis.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Boundary {
    #[default]
    Periodic,
    /// No-slip wall half a cell outside the domain (bounce-back).
    Wall,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LbmConfig {
    pub tau: f64,
    /// Body-force magnitude standing in for the pressure gradient `dp/dx`.
    pub drive: f64,
    pub axis: usize,
    /// Per-axis boundaries; missing entries are periodic.
    pub boundaries: Vec<Boundary>,
}

impl Default for LbmConfig {
    fn default() -> Self {
        Self {
            tau: 1.0,
            drive: 1e-5,
            axis: 0,
            boundaries: Vec::new(),
        }
    }
}

impl LbmConfig {
    pub fn viscosity(&self) -> f64 {
        (self.tau - 0.5) / 3.0
    }
}

/// Flow state over a solid/fluid mask.
#[derive(Clone, Debug)]
pub struct LbmState {
    lattice: Lattice,
    shape: Vec<usize>,
    solid: Vec<bool>,
    config: LbmConfig,
    f: Vec<f64>,
    scratch: Vec<f64>,
    /// Upstream node for each (node, direction), or `BOUNCE`.
    source: Vec<usize>,
    /// Fluid nodes with at least one fluid neighbour receive the body force.
    forced: Vec<bool>,
    steps: usize,
}

impl LbmState {
    /// Fluid at rest with unit density.
    pub fn new(shape: &[usize], solid: Vec<bool>, config: LbmConfig) -> Result<Self> {
        let lattice = Lattice::for_dims(shape.len())?;
        let n: usize = shape.iter().product();
        if n == 0 || solid.len() != n {
            return invalid!("solid mask has {} cells for shape {shape:?}", solid.len());
        }
        if !(config.tau > 0.5 && config.tau.is_finite()) {
            return invalid!("tau must exceed 1/2, got {}", config.tau);
        }
        if config.axis >= shape.len() {
            return invalid!("drive axis {} out of range", config.axis);
        }
        if !config.drive.is_finite() {
            return invalid!("drive must be finite");
        }
        if config.boundaries.len() > shape.len() {
            return invalid!("{} boundaries for {} axes", config.boundaries.len(), shape.len());
        }
        let q = lattice.q();
        let (source, forced) = build_sources(lattice, shape, &solid, &config);
        let mut f = vec![0.0; n * q];
        for (node, chunk) in f.chunks_mut(q).enumerate() {
            if !solid[node] {
                chunk.copy_from_slice(lattice.weights());
            }
        }
        Ok(Self {
            lattice,
            shape: shape.to_vec(),
            solid,
            scratch: vec![0.0; n * q],
            config,
            f,
            source,
            forced,
            steps: 0,
        })
    }

    /// Cells whose phase equals `solid_phase` become walls.
    pub fn from_microstructure(ms: &Microstructure, solid_phase: u8, config: LbmConfig) -> Result<Self> {
        if solid_phase > 1 {
            return invalid!("solid phase must be 0 or 1, got {solid_phase}");
        }
        let solid = ms.phases().iter().map(|&p| p == solid_phase).collect();
        Self::new(ms.shape(), solid, config)
    }

    pub fn lattice(&self) -> Lattice {
        self.lattice
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn config(&self) -> &LbmConfig {
        &self.config
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn distributions(&self) -> &[f64] {
        &self.f
    }

    pub fn distributions_mut(&mut self) -> &mut [f64] {
        &mut self.f
    }

    pub fn fluid_count(&self) -> usize {
        self.solid.iter().filter(|s| !**s).count()
    }

    pub fn total_mass(&self) -> f64 {
        self.f.iter().sum()
    }

    fn force(&self, node: usize) -> [f64; 3] {
        let mut g = [0.0; 3];
        if self.forced[node] {
            g[self.config.axis] = self.config.drive;
        }
        g
    }

    /// Density and force-corrected velocity at `node` (zero for solids).
    pub fn moments(&self, node: usize) -> (f64, [f64; 3]) {
        if self.solid[node] {
            return (0.0, [0.0; 3]);
        }
        let q = self.lattice.q();
        moments(
            self.lattice,
            &self.f[node * q..(node + 1) * q],
            self.force(node),
        )
    }

    /// Domain-average (superficial) velocity; solid cells count as zero.
    pub fn mean_velocity(&self) -> [f64; 3] {
        let mut sum = [0.0; 3];
        for node in 0..self.solid.len() {
            let (_, u) = self.moments(node);
            for a in 0..3 {
                sum[a] += u[a];
            }
        }
        let n = self.solid.len() as f64;
        sum.map(|v| v / n)
    }

    /// Interleaved per-node velocity (`dims` components per node).
    pub fn velocity_field(&self) -> Vec<f64> {
        let d = self.lattice.dims();
        let mut out = Vec::with_capacity(self.solid.len() * d);
        for node in 0..self.solid.len() {
            let (_, u) = self.moments(node);
            out.extend_from_slice(&u[..d]);
        }
        out
    }

    /// One collide-and-stream update.
    pub fn step(&mut self) -> Result<()> {
        let lat = self.lattice;
        let q = lat.q();
        let omega = 1.0 / self.config.tau;
        let force_scale = 1.0 - 0.5 * omega;
        let c = lat.velocities();
        let w = lat.weights();
        {
            let f = &self.f;
            let solid = &self.solid;
            let forced = &self.forced;
            let (axis, drive) = (self.config.axis, self.config.drive);
            par::for_each_chunk_mut(&mut self.scratch, NODE_CHUNK * q, |ci, out| {
                let base = ci * NODE_CHUNK;
                for (k, post) in out.chunks_mut(q).enumerate() {
                    let node = base + k;
                    if solid[node] {
                        post.fill(0.0);
                        continue;
                    }
                    let fi = &f[node * q..(node + 1) * q];
                    let mut g = [0.0; 3];
                    if forced[node] {
                        g[axis] = drive;
                    }
                    let (rho, u) = moments(lat, fi, g);
                    let uu = u[0] * u[0] + u[1] * u[1] + u[2] * u[2];
                    for i in 0..q {
                        let ci = [c[i][0] as f64, c[i][1] as f64, c[i][2] as f64];
                        let cu = ci[0] * u[0] + ci[1] * u[1] + ci[2] * u[2];
                        let feq = w[i] * rho * (1.0 + 3.0 * cu + 4.5 * cu * cu - 1.5 * uu);
                        let mut src = 0.0;
                        for a in 0..3 {
                            src += (3.0 * (ci[a] - u[a]) + 9.0 * cu * ci[a]) * g[a];
                        }
                        post[i] = fi[i] - omega * (fi[i] - feq) + force_scale * w[i] * src;
                    }
                }
            });
        }
        let opposite: Vec<usize> = (0..q).map(|i| lat.opposite(i)).collect();
        {
            let post = &self.scratch;
            let source = &self.source;
            let solid = &self.solid;
            par::for_each_chunk_mut(&mut self.f, NODE_CHUNK * q, |ci, out| {
                let base = ci * NODE_CHUNK;
                for (k, fnew) in out.chunks_mut(q).enumerate() {
                    let node = base + k;
                    if solid[node] {
                        continue;
                    }
                    for i in 0..q {
                        let s = source[node * q + i];
                        fnew[i] = if s == BOUNCE {
                            post[node * q + opposite[i]]
                        } else {
                            post[s * q + i]
                        };
                    }
                }
            });
        }
        self.steps += 1;
        if let Some(pos) = self.f.iter().position(|v| !v.is_finite()) {
            let node = pos / q;
            let mut coord = vec![0; self.shape.len()];
            unravel(node, &self.shape, &mut coord);
            return Err(Error::Divergence(format!(
                "non-finite distribution at node {coord:?} after {} steps",
                self.steps
            )));
        }
        Ok(())
    }

    /// Step until the mean velocity along the drive axis changes by less
    /// than `tol` (relative) over a 100-step window.
    pub fn run_to_steady(&mut self, tol: f64, max_steps: usize) -> Result<SteadyReport> {
        if !(tol > 0.0) {
            return invalid!("tolerance must be positive, got {tol}");
        }
        let axis = self.config.axis;
        let start = self.steps;
        let mut prev = self.mean_velocity()[axis];
        if self.fluid_count() == 0 {
            return Ok(SteadyReport {
                steps: 0,
                converged: true,
                mean_velocity: 0.0,
                last_change: 0.0,
            });
        }
        let mut last_change = f64::INFINITY;
        while self.steps - start < max_steps {
            let window = STEADY_WINDOW.min(max_steps - (self.steps - start));
            for _ in 0..window {
                self.step()?;
            }
            let now = self.mean_velocity()[axis];
            last_change = if now == prev {
                0.0
            } else {
                (now - prev).abs() / now.abs().max(prev.abs())
            };
            prev = now;
            if window == STEADY_WINDOW && last_change < tol {
                return Ok(SteadyReport {
                    steps: self.steps - start,
                    converged: true,
                    mean_velocity: now,
                    last_change,
                });
            }
        }
        Ok(SteadyReport {
            steps: self.steps - start,
            converged: false,
            mean_velocity: prev,
            last_change,
        })
    }
}

pub const STEADY_WINDOW: usize = 100;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SteadyReport {
    pub steps: usize,
    pub converged: bool,
    pub mean_velocity: f64,
    pub last_change: f64,
}

fn moments(lat: Lattice, f: &[f64], g: [f64; 3]) -> (f64, [f64; 3]) {
    let c = lat.velocities();
    let mut rho = 0.0;
    let mut m = [0.0; 3];
    for (fi, ci) in f.iter().zip(c) {
        rho += fi;
        for a in 0..3 {
            m[a] += fi * ci[a] as f64;
        }
    }
    if rho <= 0.0 {
        return (rho, [0.0; 3]);
    }
    (rho, [0, 1, 2].map(|a| (m[a] + 0.5 * g[a]) / rho))
}

fn build_sources(
    lat: Lattice,
    shape: &[usize],
    solid: &[bool],
    config: &LbmConfig,
) -> (Vec<usize>, Vec<bool>) {
    let q = lat.q();
    let d = shape.len();
    let n = solid.len();
    let c = lat.velocities();
    let boundary = |a: usize| config.boundaries.get(a).copied().unwrap_or_default();
    let mut source = vec![BOUNCE; n * q];
    let mut forced = vec![false; n];
    let mut coord = vec![0usize; d];
    for node in 0..n {
        if solid[node] {
            continue;
        }
        unravel(node, shape, &mut coord);
        let mut has_fluid_neighbour = false;
        for i in 0..q {
            // Pull from x - c_i.
            let mut idx = 0;
            let mut stride = 1;
            let mut inside = true;
            for a in 0..d {
                let mut x = coord[a] as i64 - c[i][a] as i64;
                let ext = shape[a] as i64;
                if x < 0 || x >= ext {
                    match boundary(a) {
                        Boundary::Periodic => x = x.rem_euclid(ext),
                        Boundary::Wall => {
                            inside = false;
                            break;
                        }
                    }
                }
                idx += x as usize * stride;
                stride *= shape[a];
            }
            if inside && !solid[idx] {
                source[node * q + i] = idx;
                if i != 0 {
                    has_fluid_neighbour = true;
                }
            }
        }
        forced[node] = has_fluid_neighbour;
    }
    (source, forced)
}

/// `kappa = u_mean * mu / drive` along the drive axis.
pub fn darcy_permeability(st: &LbmState) -> Result<f64> {
    let drive = st.config.drive;
    if drive == 0.0 {
        return invalid!("permeability is undefined for zero drive");
    }
    let u = st.mean_velocity()[st.config.axis];
    Ok(u * st.config.viscosity() / drive)
}

/// Upper bounds of the six permeability classes; the last class is unbounded.
pub const CLASS_UPPER_BOUNDS: [f64; 5] = [0.2, 0.5, 1.5, 3.0, 5.0];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PermeabilityClass {
    pub index: usize,
    pub lower: f64,
    /// `None` for the unbounded top class.
    pub upper: Option<f64>,
}

/// Six-way bucketing of lattice-unit permeability. A value equal to a class
/// boundary belongs to the lower class; `kappa = 0` is class 0.
pub fn classify_permeability(kappa: f64) -> Result<PermeabilityClass> {
    if !(kappa >= 0.0) || kappa.is_infinite() {
        return invalid!("permeability must be finite and non-negative, got {kappa}");
    }
    let index = CLASS_UPPER_BOUNDS
        .iter()
        .position(|&ub| kappa <= ub)
        .unwrap_or(CLASS_UPPER_BOUNDS.len());
    Ok(PermeabilityClass {
        index,
        lower: if index == 0 { 0.0 } else { CLASS_UPPER_BOUNDS[index - 1] },
        upper: CLASS_UPPER_BOUNDS.get(index).copied(),
    })
}

/// Channel of `width` fluid rows between two walls, flow along axis 0.
pub fn channel(length: usize, width: usize, config: LbmConfig) -> Result<LbmState> {
    let cfg = LbmConfig {
        axis: 0,
        boundaries: vec![Boundary::Periodic, Boundary::Wall],
        ..config
    };
    LbmState::new(&[length, width], vec![false; length * width], cfg)
}

/// Rectangular duct with walls on the two transverse axes, flow along axis 0.
pub fn duct(length: usize, a: usize, b: usize, config: LbmConfig) -> Result<LbmState> {
    let cfg = LbmConfig {
        axis: 0,
        boundaries: vec![Boundary::Periodic, Boundary::Wall, Boundary::Wall],
        ..config
    };
    LbmState::new(&[length, a, b], vec![false; length * a * b], cfg)
}
