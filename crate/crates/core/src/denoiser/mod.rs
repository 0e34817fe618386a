//! Noise predictors: a small convolutional U-Net with time and label
//! embeddings, trained with the noise-prediction MSE, plus the exact
//! posterior-mean predictor for Gaussian data.

mod checkpoint;
mod layers;
mod oracle;
mod train;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::NoisePredictor;
use crate::error::{invalid, Error, Result};
use crate::field::Field;

use layers::{silu, silu_grad, upsample, upsample_backward, Conv, ConvCache, GnCache, GroupNorm, Linear, ParamAlloc, ResBlock, ResCache};

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CheckpointHeader};
pub use oracle::{gaussian_oracle_eps, GaussianOracle};
pub use train::{
    apply_label_dropout, fit, train_step, Optimizer, OptimizerConfig, OptimizerKind, TrainBatch, TrainItem,
    TrainSettings,
};

/// Network shape. Channel widths are `base_channels * channel_mults[l]` per
/// resolution level; every spatial extent must be divisible by
/// `2^(levels - 1)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Architecture {
    pub shape: Vec<usize>,
    pub base_channels: usize,
    pub channel_mults: Vec<usize>,
    pub res_blocks: usize,
    pub embed_dim: usize,
    /// Conditioning classes, not counting the null label.
    pub num_classes: usize,
    /// Upper bound on GroupNorm groups; the actual count divides the width.
    pub norm_groups: usize,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            shape: vec![32, 32],
            base_channels: 16,
            channel_mults: vec![1, 2, 4],
            res_blocks: 2,
            embed_dim: 32,
            num_classes: 0,
            norm_groups: 4,
        }
    }
}

impl Architecture {
    pub fn dims(&self) -> usize {
        self.shape.len()
    }

    pub fn levels(&self) -> usize {
        self.channel_mults.len()
    }

    pub fn widths(&self) -> Vec<usize> {
        self.channel_mults.iter().map(|m| m * self.base_channels).collect()
    }

    /// Label-table rows: one per class plus the null label (last row).
    pub fn label_count(&self) -> usize {
        self.num_classes + 1
    }

    pub fn null_label(&self) -> usize {
        self.num_classes
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dims();
        if d != 2 && d != 3 {
            return invalid!("architecture must be 2D or 3D, got shape {:?}", self.shape);
        }
        if self.levels() == 0 || self.channel_mults.contains(&0) {
            return invalid!("channel_mults must be nonempty and positive");
        }
        if self.base_channels == 0 || self.res_blocks == 0 || self.norm_groups == 0 {
            return invalid!("base_channels, res_blocks and norm_groups must be positive");
        }
        if self.embed_dim < 2 || !self.embed_dim.is_multiple_of(2) {
            return invalid!("embed_dim must be even and >= 2, got {}", self.embed_dim);
        }
        let div = 1usize << (self.levels() - 1);
        if self.shape.iter().any(|&n| n == 0 || n % div != 0) {
            return invalid!(
                "every extent of {:?} must be a positive multiple of {div}",
                self.shape
            );
        }
        Ok(())
    }

    /// Closed-form parameter count.
    pub fn param_count(&self) -> usize {
        let taps3 = 3usize.pow(self.dims() as u32);
        let e = self.embed_dim;
        let conv = |cin: usize, cout: usize, taps: usize| cout * cin * taps + cout;
        let gn = |c: usize| 2 * c;
        let res = |cin: usize, cout: usize| {
            gn(cin)
                + conv(cin, cout, taps3)
                + (e * cout + cout)
                + gn(cout)
                + conv(cout, cout, taps3)
                + if cin != cout { conv(cin, cout, 1) } else { 0 }
        };
        let w = self.widths();
        let levels = w.len();
        let mut total = self.label_count() * e + e * e + e + conv(1, w[0], taps3);
        let mut ch = w[0];
        for (l, &wl) in w.iter().enumerate() {
            for _ in 0..self.res_blocks {
                total += res(ch, wl);
                ch = wl;
            }
            if l + 1 < levels {
                total += conv(wl, wl, taps3);
            }
        }
        total += res(ch, ch);
        for l in (0..levels).rev() {
            for b in 0..self.res_blocks {
                let cin = if b == 0 { ch + w[l] } else { w[l] };
                total += res(cin, w[l]);
                ch = w[l];
            }
        }
        total + gn(w[0]) + conv(w[0], 1, taps3)
    }
}

/// Sinusoidal embedding: `dim / 2` interleaved `(sin(t w_k), cos(t w_k))`
/// pairs with `w_k = 10000^(-k / (dim / 2))`.
pub fn time_embedding(t: usize, dim: usize) -> Result<Vec<f64>> {
    if dim < 2 || !dim.is_multiple_of(2) {
        return invalid!("embedding dimension must be even and >= 2, got {dim}");
    }
    let half = dim / 2;
    let mut out = Vec::with_capacity(dim);
    for k in 0..half {
        let w = 10000f64.powf(-(k as f64) / half as f64);
        let a = t as f64 * w;
        out.push(a.sin());
        out.push(a.cos());
    }
    Ok(out)
}

#[derive(Clone, Debug)]
struct Network {
    label_table: usize,
    emb: Linear,
    conv_in: Conv,
    enc: Vec<Vec<ResBlock>>,
    down: Vec<Conv>,
    mid: ResBlock,
    dec: Vec<Vec<ResBlock>>,
    gn_out: GroupNorm,
    conv_out: Conv,
    len: usize,
}

impl Network {
    fn build(arch: &Architecture) -> Self {
        let mut a = ParamAlloc::default();
        let d = arch.dims();
        let e = arch.embed_dim;
        let g = arch.norm_groups;
        let w = arch.widths();
        let levels = w.len();
        let label_table = a.take(arch.label_count() * e);
        let emb = Linear::new(&mut a, e, e);
        let conv_in = Conv::new(&mut a, 1, w[0], 3, 1, d);
        let mut enc = Vec::new();
        let mut down = Vec::new();
        let mut ch = w[0];
        for (l, &wl) in w.iter().enumerate() {
            let mut blocks = Vec::new();
            for _ in 0..arch.res_blocks {
                blocks.push(ResBlock::new(&mut a, ch, wl, e, g, d));
                ch = wl;
            }
            enc.push(blocks);
            if l + 1 < levels {
                down.push(Conv::new(&mut a, wl, wl, 3, 2, d));
            }
        }
        let mid = ResBlock::new(&mut a, ch, ch, e, g, d);
        // Decoder blocks are stored by level index, built deepest first.
        let mut dec: Vec<Vec<ResBlock>> = vec![Vec::new(); levels];
        for l in (0..levels).rev() {
            for b in 0..arch.res_blocks {
                let cin = if b == 0 { ch + w[l] } else { w[l] };
                dec[l].push(ResBlock::new(&mut a, cin, w[l], e, g, d));
                ch = w[l];
            }
        }
        let gn_out = GroupNorm::new(&mut a, w[0], g);
        let conv_out = Conv::new(&mut a, w[0], 1, 3, 1, d);
        Self {
            label_table,
            emb,
            conv_in,
            enc,
            down,
            mid,
            dec,
            gn_out,
            conv_out,
            len: a.len,
        }
    }

    fn init<R: Rng>(&self, p: &mut [f64], e: usize, rng: &mut R) {
        let rows = (self.emb.w - self.label_table) / e;
        for v in &mut p[self.label_table..self.label_table + rows * e] {
            *v = rng.random_range(-1.0..1.0);
        }
        self.emb.init(p, rng);
        self.conv_in.init(p, rng);
        for b in self.enc.iter().flatten() {
            b.init(p, rng);
        }
        for c in &self.down {
            c.init(p, rng);
        }
        self.mid.init(p, rng);
        for b in self.dec.iter().flatten() {
            b.init(p, rng);
        }
        self.gn_out.init(p);
        self.conv_out.zero(p);
    }
}

struct Cache {
    e0: Vec<f64>,
    pre_emb: Vec<f64>,
    emb: Vec<f64>,
    conv_in: ConvCache,
    enc: Vec<Vec<ResCache>>,
    enc_shapes: Vec<Vec<usize>>,
    down: Vec<ConvCache>,
    mid: ResCache,
    dec: Vec<Vec<ResCache>>,
    gn_out: GnCache,
    a_out: Vec<f64>,
    conv_out: ConvCache,
}

/// Trainable noise predictor.
#[derive(Clone, Debug)]
pub struct DenoiserModel {
    arch: Architecture,
    params: Vec<f64>,
    net: Network,
}

impl DenoiserModel {
    /// Fan-in scaled uniform initialization; the output layer starts at zero
    /// so an untrained model predicts `eps = 0`.
    pub fn new(arch: Architecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let net = Network::build(&arch);
        let mut params = vec![0.0; net.len];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        net.init(&mut params, arch.embed_dim, &mut rng);
        Ok(Self { arch, params, net })
    }

    pub fn from_params(arch: Architecture, params: Vec<f64>) -> Result<Self> {
        arch.validate()?;
        let net = Network::build(&arch);
        if params.len() != net.len {
            return invalid!(
                "architecture needs {} parameters, got {}",
                net.len,
                params.len()
            );
        }
        Ok(Self { arch, params, net })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    /// Round every parameter through `f32`, matching a checkpoint round trip.
    pub fn round_to_f32(&mut self) {
        self.params.iter_mut().for_each(|v| *v = *v as f32 as f64);
    }

    fn label_slot(&self, label: Option<usize>) -> Result<usize> {
        match label {
            None => Ok(self.arch.null_label()),
            Some(l) if l < self.arch.num_classes => Ok(l),
            Some(l) => invalid!(
                "label {l} out of range for a model with {} classes",
                self.arch.num_classes
            ),
        }
    }

    fn check_input(&self, x: &Field) -> Result<()> {
        if x.shape() != self.arch.shape.as_slice() {
            return Err(Error::ShapeMismatch {
                expected: self.arch.shape.clone(),
                actual: x.shape().to_vec(),
            });
        }
        Ok(())
    }

    fn forward(&self, x: &[f64], t: usize, slot: usize) -> Result<(Vec<f64>, Cache)> {
        let p = &self.params;
        let net = &self.net;
        let e = self.arch.embed_dim;
        let mut e0 = time_embedding(t, e)?;
        let row = &p[net.label_table + slot * e..net.label_table + (slot + 1) * e];
        e0.iter_mut().zip(row).for_each(|(a, b)| *a += b);
        let pre_emb = net.emb.forward(p, &e0);
        let emb: Vec<f64> = pre_emb.iter().map(|&v| silu(v)).collect();

        let mut spatial = self.arch.shape.clone();
        let (mut h, _, conv_in) = net.conv_in.forward(p, x, &spatial);
        let levels = self.arch.levels();
        let mut enc = Vec::with_capacity(levels);
        let mut enc_shapes = Vec::with_capacity(levels);
        let mut skips = Vec::with_capacity(levels);
        let mut down = Vec::new();
        for l in 0..levels {
            let mut caches = Vec::new();
            for b in &net.enc[l] {
                let (y, c) = b.forward(p, &h, &emb, &spatial);
                h = y;
                caches.push(c);
            }
            enc.push(caches);
            enc_shapes.push(spatial.clone());
            skips.push(h.clone());
            if l + 1 < levels {
                let (y, s, c) = net.down[l].forward(p, &h, &spatial);
                h = y;
                spatial = s;
                down.push(c);
            }
        }
        let (y, mid) = net.mid.forward(p, &h, &emb, &spatial);
        h = y;
        let mut dec: Vec<Vec<ResCache>> = (0..levels).map(|_| Vec::new()).collect();
        for l in (0..levels).rev() {
            h.extend_from_slice(&skips[l]);
            for b in &net.dec[l] {
                let (y, c) = b.forward(p, &h, &emb, &spatial);
                h = y;
                dec[l].push(c);
            }
            if l > 0 {
                let ch = net.dec[l].last().map(|b| b.conv2.cout).unwrap_or(0);
                let (y, s) = upsample(&h, ch, &spatial);
                h = y;
                spatial = s;
            }
        }
        let n: usize = spatial.iter().product();
        let (a_out, gn_out) = net.gn_out.forward(p, &h, n);
        let s_out: Vec<f64> = a_out.iter().map(|&v| silu(v)).collect();
        let (out, _, conv_out) = net.conv_out.forward(p, &s_out, &spatial);
        Ok((
            out,
            Cache {
                e0,
                pre_emb,
                emb,
                conv_in,
                enc,
                enc_shapes,
                down,
                mid,
                dec,
                gn_out,
                a_out,
                conv_out,
            },
        ))
    }

    /// Accumulate `d(loss)/d(params)` into `grad` given `dout = d(loss)/d(output)`.
    fn backward(&self, cache: &Cache, slot: usize, dout: &[f64], grad: &mut [f64]) {
        let p = &self.params;
        let net = &self.net;
        let e = self.arch.embed_dim;
        let levels = self.arch.levels();
        let w = self.arch.widths();
        let mut demb = vec![0.0; e];

        let n0: usize = self.arch.shape.iter().product();
        let ds = net
            .conv_out
            .backward(p, grad, &cache.conv_out, dout, true)
            .expect("input grad requested");
        let da: Vec<f64> = ds.iter().zip(&cache.a_out).map(|(d, &a)| d * silu_grad(a)).collect();
        let mut dh = net.gn_out.backward(p, grad, &cache.gn_out, &da, n0);

        let mut dskips: Vec<Vec<f64>> = vec![Vec::new(); levels];
        for l in 0..levels {
            let spatial = &cache.enc_shapes[l];
            let n: usize = spatial.iter().product();
            if l > 0 {
                dh = upsample_backward(&dh, w[l], spatial);
            }
            for (b, c) in net.dec[l].iter().zip(&cache.dec[l]).rev() {
                dh = b.backward(p, grad, c, &cache.emb, &dh, &mut demb, n);
            }
            let split = dh.len() - w[l] * n;
            dskips[l] = dh.split_off(split);
        }
        let n_deep: usize = cache.enc_shapes[levels - 1].iter().product();
        dh = net
            .mid
            .backward(p, grad, &cache.mid, &cache.emb, &dh, &mut demb, n_deep);
        for l in (0..levels).rev() {
            let spatial = &cache.enc_shapes[l];
            let n: usize = spatial.iter().product();
            if l + 1 < levels {
                dh = net.down[l]
                    .backward(p, grad, &cache.down[l], &dh, true)
                    .expect("input grad requested");
            }
            dh.iter_mut().zip(&dskips[l]).for_each(|(a, b)| *a += b);
            for (b, c) in net.enc[l].iter().zip(&cache.enc[l]).rev() {
                dh = b.backward(p, grad, c, &cache.emb, &dh, &mut demb, n);
            }
        }
        net.conv_in.backward(p, grad, &cache.conv_in, &dh, false);

        let dpre: Vec<f64> = demb
            .iter()
            .zip(&cache.pre_emb)
            .map(|(d, &a)| d * silu_grad(a))
            .collect();
        let mut de0 = vec![0.0; e];
        net.emb.backward(p, grad, &cache.e0, &dpre, &mut de0);
        let row = net.label_table + slot * e;
        grad[row..row + e].iter_mut().zip(&de0).for_each(|(g, d)| *g += d);
    }

    /// Noise prediction for `x_t` at step `t`; `None` selects the null label.
    pub fn predict(&self, x_t: &Field, t: usize, label: Option<usize>) -> Result<Field> {
        self.check_input(x_t)?;
        if t == 0 {
            return invalid!("time step must be >= 1");
        }
        let slot = self.label_slot(label)?;
        let (out, _) = self.forward(x_t.values(), t, slot)?;
        let f = Field::new(x_t.shape(), out)?;
        if !f.is_finite() {
            return Err(Error::Divergence(format!("non-finite prediction at t={t}")));
        }
        Ok(f)
    }
}

impl NoisePredictor for DenoiserModel {
    fn predict_eps(&self, x_t: &Field, t: usize, label: Option<usize>) -> Result<Field> {
        self.predict(x_t, t, label)
    }
}
