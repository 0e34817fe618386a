use rand::Rng;
use serde::{Deserialize, Serialize};

use super::DenoiserModel;
use crate::diffusion::forward_sample;
use crate::error::{invalid, Error, Result};
use crate::field::Field;
use crate::par;
use crate::schedule::NoiseSchedule;

/// Clean training images (scaled to [-1, 1]) with optional class labels.
#[derive(Clone, Debug)]
pub struct TrainBatch {
    pub x0: Vec<Field>,
    pub labels: Option<Vec<usize>>,
}

impl TrainBatch {
    pub fn new(x0: Vec<Field>, labels: Option<Vec<usize>>) -> Result<Self> {
        let b = Self { x0, labels };
        if b.x0.is_empty() {
            return invalid!("training batch is empty");
        }
        let shape = b.x0[0].shape();
        if let Some(f) = b.x0.iter().find(|f| f.shape() != shape) {
            return Err(Error::ShapeMismatch {
                expected: shape.to_vec(),
                actual: f.shape().to_vec(),
            });
        }
        if let Some(l) = &b.labels {
            if l.len() != b.x0.len() {
                return invalid!("{} labels for {} images", l.len(), b.x0.len());
            }
        }
        Ok(b)
    }

    pub fn len(&self) -> usize {
        self.x0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x0.is_empty()
    }
}

/// One fully specified loss term: clean image, label after dropout, step
/// and noise.
#[derive(Clone, Debug)]
pub struct TrainItem {
    pub x0: Field,
    pub label: Option<usize>,
    pub t: usize,
    pub eps: Field,
}

/// Replace each present label by `None` with probability `p`.
pub fn apply_label_dropout<R: Rng + ?Sized>(
    labels: Option<&[usize]>,
    count: usize,
    p: f64,
    rng: &mut R,
) -> Result<Vec<Option<usize>>> {
    if !(0.0..=1.0).contains(&p) {
        return invalid!("label dropout must lie in [0, 1], got {p}");
    }
    Ok(match labels {
        None => vec![None; count],
        Some(l) => l
            .iter()
            .map(|&v| if rng.random::<f64>() < p { None } else { Some(v) })
            .collect(),
    })
}

impl DenoiserModel {
    /// Mean squared noise-prediction error over all items and cells, with
    /// its gradient. Per-item gradients are summed in item order.
    pub fn loss_and_grad(&self, items: &[TrainItem], s: &NoiseSchedule) -> Result<(f64, Vec<f64>)> {
        if items.is_empty() {
            return invalid!("no training items");
        }
        let n = items[0].x0.len();
        let scale = 2.0 / (items.len() * n) as f64;
        let parts = par::map_slice(items, |item| -> Result<(f64, Vec<f64>)> {
            self.check_input(&item.x0)?;
            item.x0.ensure_same_shape(&item.eps)?;
            let slot = self.label_slot(item.label)?;
            let x_t = forward_sample(&item.x0, item.t, &item.eps, s)?;
            let (out, cache) = self.forward(x_t.values(), item.t, slot)?;
            let mut sq = 0.0;
            let dout: Vec<f64> = out
                .iter()
                .zip(item.eps.values())
                .map(|(o, e)| {
                    let d = o - e;
                    sq += d * d;
                    scale * d
                })
                .collect();
            let mut grad = vec![0.0; self.params.len()];
            self.backward(&cache, slot, &dout, &mut grad);
            Ok((sq, grad))
        });
        let mut loss = 0.0;
        let mut grad = vec![0.0; self.params.len()];
        for part in parts {
            let (sq, g) = part?;
            loss += sq;
            grad.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
        }
        Ok((loss / (items.len() * n) as f64, grad))
    }

    /// Draw `t`, noise and label dropout for every image in `batch`.
    pub fn draw_items<R: Rng + ?Sized>(
        &self,
        batch: &TrainBatch,
        s: &NoiseSchedule,
        rng: &mut R,
        label_dropout: f64,
    ) -> Result<Vec<TrainItem>> {
        if let Some(l) = &batch.labels {
            if let Some(&bad) = l.iter().find(|&&v| v >= self.arch.num_classes) {
                return invalid!(
                    "label {bad} out of range for a model with {} classes",
                    self.arch.num_classes
                );
            }
        }
        let labels = apply_label_dropout(batch.labels.as_deref(), batch.len(), label_dropout, rng)?;
        batch
            .x0
            .iter()
            .zip(labels)
            .map(|(x0, label)| {
                let t = rng.random_range(1..=s.steps());
                let eps = Field::standard_normal(x0.shape(), rng)?;
                Ok(TrainItem {
                    x0: x0.clone(),
                    label,
                    t,
                    eps,
                })
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    #[default]
    Sgd,
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Sgd,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Optimizer state for one parameter vector.
#[derive(Clone, Debug)]
pub struct Optimizer {
    config: OptimizerConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    steps: u64,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig, param_count: usize) -> Self {
        let (m, v) = match config.kind {
            OptimizerKind::Sgd => (Vec::new(), Vec::new()),
            OptimizerKind::Adam => (vec![0.0; param_count], vec![0.0; param_count]),
        };
        Self {
            config,
            m,
            v,
            steps: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn update(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.steps += 1;
        match self.config.kind {
            OptimizerKind::Sgd => {
                params.iter_mut().zip(grad).for_each(|(p, g)| *p -= lr * g);
            }
            OptimizerKind::Adam => {
                let OptimizerConfig {
                    beta1: b1,
                    beta2: b2,
                    epsilon,
                    ..
                } = self.config;
                let c1 = 1.0 - b1.powi(self.steps as i32);
                let c2 = 1.0 - b2.powi(self.steps as i32);
                for i in 0..params.len() {
                    let g = grad[i];
                    self.m[i] = b1 * self.m[i] + (1.0 - b1) * g;
                    self.v[i] = b2 * self.v[i] + (1.0 - b2) * g * g;
                    let mh = self.m[i] / c1;
                    let vh = self.v[i] / c2;
                    params[i] -= lr * mh / (vh.sqrt() + epsilon);
                }
            }
        }
    }
}

/// One optimisation step on the simplified noise-prediction loss.
///
/// The parameters are left untouched when the loss or gradient is not
/// finite.
pub fn train_step<R: Rng + ?Sized>(
    model: &mut DenoiserModel,
    opt: &mut Optimizer,
    batch: &TrainBatch,
    s: &NoiseSchedule,
    rng: &mut R,
    label_dropout: f64,
    lr: f64,
) -> Result<f64> {
    if !(lr > 0.0 && lr.is_finite()) {
        return invalid!("learning rate must be positive, got {lr}");
    }
    let items = model.draw_items(batch, s, rng, label_dropout)?;
    let (loss, grad) = model.loss_and_grad(&items, s)?;
    if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::Divergence(format!(
            "non-finite training loss ({loss}) at optimizer step {}",
            opt.steps() + 1
        )));
    }
    opt.update(&mut model.params, &grad, lr);
    Ok(loss)
}

/// Minibatch schedule and optimiser settings for [`fit`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSettings {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Learning rate multiplier applied over the last quarter of the run.
    pub final_lr_factor: f64,
    pub label_dropout: f64,
    pub optimizer: OptimizerConfig,
    /// Decay of the parameter moving average copied into the model at the
    /// end of [`fit`]; 0 keeps the raw final parameters.
    pub ema_decay: f64,
    pub seed: u64,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 8,
            lr: 2e-3,
            final_lr_factor: 0.3,
            label_dropout: 0.1,
            optimizer: OptimizerConfig {
                kind: OptimizerKind::Adam,
                ..OptimizerConfig::default()
            },
            ema_decay: 0.999,
            seed: 0,
        }
    }
}

impl TrainSettings {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return invalid!("batch size must be positive");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return invalid!("learning rate must be positive, got {}", self.lr);
        }
        if !(self.final_lr_factor > 0.0 && self.final_lr_factor <= 1.0) {
            return invalid!("final_lr_factor must lie in (0, 1], got {}", self.final_lr_factor);
        }
        if !(0.0..=1.0).contains(&self.label_dropout) {
            return invalid!("label dropout must lie in [0, 1], got {}", self.label_dropout);
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return invalid!("ema_decay must lie in [0, 1), got {}", self.ema_decay);
        }
        Ok(())
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        if 4 * step >= 3 * self.steps {
            self.lr * self.final_lr_factor
        } else {
            self.lr
        }
    }
}

/// Train on `data` with reshuffled epochs; `on_step(step, loss)` observes
/// progress. Returns the per-step losses.
pub fn fit(
    model: &mut DenoiserModel,
    data: &[Field],
    labels: Option<&[usize]>,
    s: &NoiseSchedule,
    settings: &TrainSettings,
    mut on_step: impl FnMut(usize, f64),
) -> Result<Vec<f64>> {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;

    settings.validate()?;
    if data.is_empty() {
        return invalid!("training set is empty");
    }
    if let Some(l) = labels {
        if l.len() != data.len() {
            return invalid!("{} labels for {} images", l.len(), data.len());
        }
    }
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(settings.seed);
    let mut opt = Optimizer::new(settings.optimizer.clone(), model.param_count());
    let bs = settings.batch_size.min(data.len());
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut pos = data.len();
    let mut losses = Vec::with_capacity(settings.steps);
    let mut ema = (settings.ema_decay > 0.0).then(|| model.params.clone());
    for step in 0..settings.steps {
        if pos + bs > order.len() {
            order.shuffle(&mut rng);
            pos = 0;
        }
        let idx = &order[pos..pos + bs];
        pos += bs;
        let batch = TrainBatch::new(
            idx.iter().map(|&i| data[i].clone()).collect(),
            labels.map(|l| idx.iter().map(|&i| l[i]).collect()),
        )?;
        let loss = train_step(
            model,
            &mut opt,
            &batch,
            s,
            &mut rng,
            settings.label_dropout,
            settings.lr_at(step),
        )?;
        if let Some(avg) = ema.as_mut() {
            // Short-horizon warm-up so early parameters fade quickly.
            let d = settings.ema_decay.min((1 + step) as f64 / (10 + step) as f64);
            avg.iter_mut()
                .zip(&model.params)
                .for_each(|(a, p)| *a = d * *a + (1.0 - d) * p);
        }
        on_step(step, loss);
        losses.push(loss);
    }
    if let Some(avg) = ema {
        model.params = avg;
    }
    Ok(losses)
}
