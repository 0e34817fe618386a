//! Differentiable building blocks over a flat parameter vector.
//!
//! Activations are channel-major: `data[c * n + i]` for channel `c` and
//! spatial cell `i` (x-fastest). Every layer stores only offsets into the
//! shared parameter buffer; gradients accumulate into a buffer of the same
//! layout.

use rand::Rng;

const NONE: usize = usize::MAX;

pub(crate) fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

pub(crate) fn silu_grad(x: f64) -> f64 {
    let s = 1.0 / (1.0 + (-x).exp());
    s * (1.0 + x * (1.0 - s))
}

/// Sequential allocator of parameter ranges.
#[derive(Default)]
pub(crate) struct ParamAlloc {
    pub len: usize,
}

impl ParamAlloc {
    pub fn take(&mut self, n: usize) -> usize {
        let off = self.len;
        self.len += n;
        off
    }
}

/// `C = alpha * A * B + beta * C` with explicit row/column strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(c.len() >= m * n);
    // SAFETY: callers pass buffers sized for the given dimensions and strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn unravel(mut idx: usize, shape: &[usize], out: &mut [usize]) {
    for (o, &n) in out.iter_mut().zip(shape) {
        *o = idx % n;
        idx /= n;
    }
}

/// Output extents of a padded (`k / 2`) convolution.
pub(crate) fn conv_out_shape(spatial: &[usize], ksize: usize, stride: usize) -> Vec<usize> {
    let pad = ksize / 2;
    spatial
        .iter()
        .map(|&n| (n + 2 * pad - ksize) / stride + 1)
        .collect()
}

/// Input cell feeding output `o` through kernel tap `k`, or `NONE` for padding.
fn gather_table(spatial: &[usize], ksize: usize, stride: usize) -> (Vec<usize>, Vec<usize>) {
    let dims = spatial.len();
    let out_shape = conv_out_shape(spatial, ksize, stride);
    let nout: usize = out_shape.iter().product();
    let taps = ksize.pow(dims as u32);
    let pad = ksize as i64 / 2;
    let mut table = vec![NONE; taps * nout];
    let mut oc = [0usize; 3];
    let mut kc = [0usize; 3];
    let ks = vec![ksize; dims];
    for k in 0..taps {
        unravel(k, &ks, &mut kc[..dims]);
        for o in 0..nout {
            unravel(o, &out_shape, &mut oc[..dims]);
            let mut idx = 0usize;
            let mut stride_acc = 1usize;
            let mut valid = true;
            for a in 0..dims {
                let c = (oc[a] * stride) as i64 + kc[a] as i64 - pad;
                if c < 0 || c >= spatial[a] as i64 {
                    valid = false;
                    break;
                }
                idx += c as usize * stride_acc;
                stride_acc *= spatial[a];
            }
            if valid {
                table[k * nout + o] = idx;
            }
        }
    }
    (table, out_shape)
}

#[derive(Clone, Debug)]
pub(crate) struct Conv {
    pub cin: usize,
    pub cout: usize,
    pub ksize: usize,
    pub stride: usize,
    pub dims: usize,
    pub w: usize,
    pub b: usize,
}

pub(crate) struct ConvCache {
    col: Vec<f64>,
    table: Vec<usize>,
    nin: usize,
    nout: usize,
}

impl Conv {
    pub fn new(
        alloc: &mut ParamAlloc,
        cin: usize,
        cout: usize,
        ksize: usize,
        stride: usize,
        dims: usize,
    ) -> Self {
        let taps = ksize.pow(dims as u32);
        let w = alloc.take(cout * cin * taps);
        let b = alloc.take(cout);
        Self {
            cin,
            cout,
            ksize,
            stride,
            dims,
            w,
            b,
        }
    }

    pub fn taps(&self) -> usize {
        self.ksize.pow(self.dims as u32)
    }

    pub fn param_len(&self) -> usize {
        self.cout * self.cin * self.taps() + self.cout
    }

    /// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero bias.
    pub fn init<R: Rng>(&self, p: &mut [f64], rng: &mut R) {
        let fan_in = (self.cin * self.taps()) as f64;
        let bound = 1.0 / fan_in.sqrt();
        for v in &mut p[self.w..self.w + self.cout * self.cin * self.taps()] {
            *v = rng.random_range(-bound..bound);
        }
        p[self.b..self.b + self.cout].fill(0.0);
    }

    pub fn zero(&self, p: &mut [f64]) {
        p[self.w..self.w + self.param_len()].fill(0.0);
    }

    pub fn forward(&self, p: &[f64], x: &[f64], spatial: &[usize]) -> (Vec<f64>, Vec<usize>, ConvCache) {
        let nin: usize = spatial.iter().product();
        debug_assert_eq!(x.len(), self.cin * nin);
        let taps = self.taps();
        let (col, table, out_shape, nout) = if taps == 1 && self.stride == 1 {
            (x.to_vec(), Vec::new(), spatial.to_vec(), nin)
        } else {
            let (table, out_shape) = gather_table(spatial, self.ksize, self.stride);
            let nout: usize = out_shape.iter().product();
            let mut col = vec![0.0; self.cin * taps * nout];
            for ci in 0..self.cin {
                let xin = &x[ci * nin..(ci + 1) * nin];
                for k in 0..taps {
                    let row = &mut col[(ci * taps + k) * nout..(ci * taps + k + 1) * nout];
                    let t = &table[k * nout..(k + 1) * nout];
                    for (dst, &src) in row.iter_mut().zip(t) {
                        if src != NONE {
                            *dst = xin[src];
                        }
                    }
                }
            }
            (col, table, out_shape, nout)
        };
        let kdim = self.cin * taps;
        let mut y = vec![0.0; self.cout * nout];
        for (co, row) in y.chunks_mut(nout).enumerate() {
            row.fill(p[self.b + co]);
        }
        gemm(
            self.cout,
            kdim,
            nout,
            &p[self.w..],
            kdim,
            1,
            &col,
            nout,
            1,
            1.0,
            &mut y,
        );
        (
            y,
            out_shape,
            ConvCache {
                col,
                table,
                nin,
                nout,
            },
        )
    }

    /// Accumulate parameter gradients; return the input gradient when asked.
    pub fn backward(
        &self,
        p: &[f64],
        grad: &mut [f64],
        cache: &ConvCache,
        dy: &[f64],
        need_input_grad: bool,
    ) -> Option<Vec<f64>> {
        let taps = self.taps();
        let kdim = self.cin * taps;
        let nout = cache.nout;
        for (co, row) in dy.chunks(nout).enumerate() {
            grad[self.b + co] += row.iter().sum::<f64>();
        }
        // dW += dy * col^T
        gemm(
            self.cout,
            nout,
            kdim,
            dy,
            nout,
            1,
            &cache.col,
            1,
            nout,
            1.0,
            &mut grad[self.w..self.w + self.cout * kdim],
        );
        if !need_input_grad {
            return None;
        }
        // dcol = W^T * dy
        let mut dcol = vec![0.0; kdim * nout];
        gemm(
            kdim,
            self.cout,
            nout,
            &p[self.w..],
            1,
            kdim,
            dy,
            nout,
            1,
            0.0,
            &mut dcol,
        );
        if cache.table.is_empty() {
            return Some(dcol);
        }
        let nin = cache.nin;
        let mut dx = vec![0.0; self.cin * nin];
        for ci in 0..self.cin {
            let dxin = &mut dx[ci * nin..(ci + 1) * nin];
            for k in 0..taps {
                let row = &dcol[(ci * taps + k) * nout..(ci * taps + k + 1) * nout];
                let t = &cache.table[k * nout..(k + 1) * nout];
                for (&g, &src) in row.iter().zip(t) {
                    if src != NONE {
                        dxin[src] += g;
                    }
                }
            }
        }
        Some(dx)
    }
}

pub(crate) const GN_EPS: f64 = 1e-5;

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Group normalization with per-channel affine parameters.
#[derive(Clone, Debug)]
pub(crate) struct GroupNorm {
    pub channels: usize,
    pub groups: usize,
    pub gamma: usize,
    pub beta: usize,
}

pub(crate) struct GnCache {
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
}

impl GroupNorm {
    pub fn new(alloc: &mut ParamAlloc, channels: usize, max_groups: usize) -> Self {
        let groups = gcd(channels, max_groups.max(1));
        let gamma = alloc.take(channels);
        let beta = alloc.take(channels);
        Self {
            channels,
            groups,
            gamma,
            beta,
        }
    }

    pub fn init(&self, p: &mut [f64]) {
        p[self.gamma..self.gamma + self.channels].fill(1.0);
        p[self.beta..self.beta + self.channels].fill(0.0);
    }

    pub fn forward(&self, p: &[f64], x: &[f64], n: usize) -> (Vec<f64>, GnCache) {
        let cpg = self.channels / self.groups;
        let gsize = cpg * n;
        let mut xhat = vec![0.0; x.len()];
        let mut inv_std = vec![0.0; self.groups];
        let mut y = vec![0.0; x.len()];
        for g in 0..self.groups {
            let xs = &x[g * gsize..(g + 1) * gsize];
            let mean = xs.iter().sum::<f64>() / gsize as f64;
            let var = xs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / gsize as f64;
            let is = 1.0 / (var + GN_EPS).sqrt();
            inv_std[g] = is;
            for (i, v) in xs.iter().enumerate() {
                let idx = g * gsize + i;
                let c = idx / n;
                let h = (v - mean) * is;
                xhat[idx] = h;
                y[idx] = p[self.gamma + c] * h + p[self.beta + c];
            }
        }
        (y, GnCache { xhat, inv_std })
    }

    pub fn backward(&self, p: &[f64], grad: &mut [f64], cache: &GnCache, dy: &[f64], n: usize) -> Vec<f64> {
        let cpg = self.channels / self.groups;
        let gsize = cpg * n;
        let mut dx = vec![0.0; dy.len()];
        for c in 0..self.channels {
            let (dys, xh) = (&dy[c * n..(c + 1) * n], &cache.xhat[c * n..(c + 1) * n]);
            grad[self.beta + c] += dys.iter().sum::<f64>();
            grad[self.gamma + c] += dys.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>();
        }
        for g in 0..self.groups {
            let range = g * gsize..(g + 1) * gsize;
            let mut mean_d = 0.0;
            let mut mean_dx = 0.0;
            for idx in range.clone() {
                let d = dy[idx] * p[self.gamma + idx / n];
                mean_d += d;
                mean_dx += d * cache.xhat[idx];
            }
            mean_d /= gsize as f64;
            mean_dx /= gsize as f64;
            let is = cache.inv_std[g];
            for idx in range {
                let d = dy[idx] * p[self.gamma + idx / n];
                dx[idx] = is * (d - mean_d - cache.xhat[idx] * mean_dx);
            }
        }
        dx
    }
}

/// Dense layer `y = W x + b`, `W` stored row-major `[out][in]`.
#[derive(Clone, Debug)]
pub(crate) struct Linear {
    pub inp: usize,
    pub out: usize,
    pub w: usize,
    pub b: usize,
}

impl Linear {
    pub fn new(alloc: &mut ParamAlloc, inp: usize, out: usize) -> Self {
        let w = alloc.take(inp * out);
        let b = alloc.take(out);
        Self { inp, out, w, b }
    }

    pub fn init<R: Rng>(&self, p: &mut [f64], rng: &mut R) {
        let bound = 1.0 / (self.inp as f64).sqrt();
        for v in &mut p[self.w..self.w + self.inp * self.out] {
            *v = rng.random_range(-bound..bound);
        }
        p[self.b..self.b + self.out].fill(0.0);
    }

    pub fn forward(&self, p: &[f64], x: &[f64]) -> Vec<f64> {
        (0..self.out)
            .map(|o| {
                let row = &p[self.w + o * self.inp..self.w + (o + 1) * self.inp];
                p[self.b + o] + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>()
            })
            .collect()
    }

    pub fn backward(&self, p: &[f64], grad: &mut [f64], x: &[f64], dy: &[f64], dx: &mut [f64]) {
        for (o, &d) in dy.iter().enumerate() {
            grad[self.b + o] += d;
            let base = self.w + o * self.inp;
            for i in 0..self.inp {
                grad[base + i] += d * x[i];
                dx[i] += d * p[base + i];
            }
        }
    }
}

/// Pre-activation residual block with embedding injection:
/// `out = conv2(silu(gn2(conv1(silu(gn1(x))) + proj(emb)))) + shortcut(x)`.
#[derive(Clone, Debug)]
pub(crate) struct ResBlock {
    pub gn1: GroupNorm,
    pub conv1: Conv,
    pub proj: Linear,
    pub gn2: GroupNorm,
    pub conv2: Conv,
    pub shortcut: Option<Conv>,
}

pub(crate) struct ResCache {
    gn1: GnCache,
    a1: Vec<f64>,
    conv1: ConvCache,
    gn2: GnCache,
    a2: Vec<f64>,
    conv2: ConvCache,
    shortcut: Option<ConvCache>,
}

impl ResBlock {
    pub fn new(alloc: &mut ParamAlloc, cin: usize, cout: usize, emb: usize, groups: usize, dims: usize) -> Self {
        let gn1 = GroupNorm::new(alloc, cin, groups);
        let conv1 = Conv::new(alloc, cin, cout, 3, 1, dims);
        let proj = Linear::new(alloc, emb, cout);
        let gn2 = GroupNorm::new(alloc, cout, groups);
        let conv2 = Conv::new(alloc, cout, cout, 3, 1, dims);
        let shortcut = (cin != cout).then(|| Conv::new(alloc, cin, cout, 1, 1, dims));
        Self {
            gn1,
            conv1,
            proj,
            gn2,
            conv2,
            shortcut,
        }
    }

    pub fn init<R: Rng>(&self, p: &mut [f64], rng: &mut R) {
        self.gn1.init(p);
        self.conv1.init(p, rng);
        self.proj.init(p, rng);
        self.gn2.init(p);
        self.conv2.init(p, rng);
        if let Some(s) = &self.shortcut {
            s.init(p, rng);
        }
    }

    pub fn forward(&self, p: &[f64], x: &[f64], emb: &[f64], spatial: &[usize]) -> (Vec<f64>, ResCache) {
        let n: usize = spatial.iter().product();
        let (a1, gn1) = self.gn1.forward(p, x, n);
        let s1: Vec<f64> = a1.iter().map(|&v| silu(v)).collect();
        let (mut h, _, conv1) = self.conv1.forward(p, &s1, spatial);
        let bias = self.proj.forward(p, emb);
        for (c, row) in h.chunks_mut(n).enumerate() {
            row.iter_mut().for_each(|v| *v += bias[c]);
        }
        let (a2, gn2) = self.gn2.forward(p, &h, n);
        let s2: Vec<f64> = a2.iter().map(|&v| silu(v)).collect();
        let (mut out, _, conv2) = self.conv2.forward(p, &s2, spatial);
        let shortcut = match &self.shortcut {
            Some(sc) => {
                let (skip, _, cache) = sc.forward(p, x, spatial);
                out.iter_mut().zip(&skip).for_each(|(o, s)| *o += s);
                Some(cache)
            }
            None => {
                out.iter_mut().zip(x).for_each(|(o, s)| *o += s);
                None
            }
        };
        (
            out,
            ResCache {
                gn1,
                a1,
                conv1,
                gn2,
                a2,
                conv2,
                shortcut,
            },
        )
    }

    /// Returns the input gradient; the embedding gradient accumulates into `demb`.
    #[allow(clippy::too_many_arguments)]
    pub fn backward(
        &self,
        p: &[f64],
        grad: &mut [f64],
        cache: &ResCache,
        emb: &[f64],
        dout: &[f64],
        demb: &mut [f64],
        n: usize,
    ) -> Vec<f64> {
        let ds2 = self
            .conv2
            .backward(p, grad, &cache.conv2, dout, true)
            .expect("input grad requested");
        let da2: Vec<f64> = ds2.iter().zip(&cache.a2).map(|(d, &a)| d * silu_grad(a)).collect();
        let dh = self.gn2.backward(p, grad, &cache.gn2, &da2, n);
        let dbias: Vec<f64> = dh.chunks(n).map(|r| r.iter().sum()).collect();
        self.proj.backward(p, grad, emb, &dbias, demb);
        let ds1 = self
            .conv1
            .backward(p, grad, &cache.conv1, &dh, true)
            .expect("input grad requested");
        let da1: Vec<f64> = ds1.iter().zip(&cache.a1).map(|(d, &a)| d * silu_grad(a)).collect();
        let mut dx = self.gn1.backward(p, grad, &cache.gn1, &da1, n);
        match (&self.shortcut, &cache.shortcut) {
            (Some(sc), Some(c)) => {
                let dskip = sc.backward(p, grad, c, dout, true).expect("input grad requested");
                dx.iter_mut().zip(&dskip).for_each(|(a, b)| *a += b);
            }
            _ => dx.iter_mut().zip(dout).for_each(|(a, b)| *a += b),
        }
        dx
    }
}

/// Nearest-neighbour 2x upsampling of channel-major data.
pub(crate) fn upsample(x: &[f64], channels: usize, coarse: &[usize]) -> (Vec<f64>, Vec<usize>) {
    let fine: Vec<usize> = coarse.iter().map(|&e| 2 * e).collect();
    let nf: usize = fine.iter().product();
    let nc: usize = coarse.iter().product();
    let parents = parent_map(&fine, coarse);
    let mut y = vec![0.0; channels * nf];
    for c in 0..channels {
        for (i, &pi) in parents.iter().enumerate() {
            y[c * nf + i] = x[c * nc + pi];
        }
    }
    (y, fine)
}

pub(crate) fn upsample_backward(dy: &[f64], channels: usize, coarse: &[usize]) -> Vec<f64> {
    let fine: Vec<usize> = coarse.iter().map(|&e| 2 * e).collect();
    let nf: usize = fine.iter().product();
    let nc: usize = coarse.iter().product();
    let parents = parent_map(&fine, coarse);
    let mut dx = vec![0.0; channels * nc];
    for c in 0..channels {
        for (i, &pi) in parents.iter().enumerate() {
            dx[c * nc + pi] += dy[c * nf + i];
        }
    }
    dx
}

fn parent_map(fine: &[usize], coarse: &[usize]) -> Vec<usize> {
    let nf: usize = fine.iter().product();
    let dims = fine.len();
    let mut c = [0usize; 3];
    (0..nf)
        .map(|i| {
            unravel(i, fine, &mut c[..dims]);
            let mut idx = 0;
            let mut stride = 1;
            for a in 0..dims {
                idx += (c[a] / 2) * stride;
                stride *= coarse[a];
            }
            idx
        })
        .collect()
}
