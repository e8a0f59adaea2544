//! SGD with momentum and weight decay, step learning-rate schedule.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::detector::{BorderDet, HeadOutputs};
use crate::error::{Error, Result};
use crate::layers::HasParams;
use crate::tensor::{Real, Tensor4};
use crate::training::dataset::{Dataset, GtObject};
use crate::training::losses::{total_loss, FocalParams, LossBreakdown};
use crate::training::targets::{assign_border_targets, assign_coarse_targets};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Iterations after which the learning rate is multiplied by `lr_gamma`.
    pub lr_steps: Vec<usize>,
    pub lr_gamma: f64,
    /// Linear warmup from `warmup_factor * base_lr`.
    pub warmup_iters: usize,
    pub warmup_factor: f64,
    pub border_iou_thresh: f64,
    pub focal: FocalParams,
    pub seed: u64,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 2000,
            batch_size: 8,
            base_lr: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
            lr_steps: vec![1400, 1800],
            lr_gamma: 0.1,
            warmup_iters: 0,
            warmup_factor: 1.0 / 3.0,
            border_iou_thresh: 0.6,
            focal: FocalParams::default(),
            seed: 7,
            log_every: 100,
        }
    }
}

impl TrainConfig {
    /// Learning rate used for the update of 0-based iteration `iter`.
    pub fn lr_at(&self, iter: usize) -> f64 {
        let decays = self.lr_steps.iter().filter(|&&s| iter >= s).count() as i32;
        let mut lr = self.base_lr * self.lr_gamma.powi(decays);
        if iter < self.warmup_iters {
            let t = iter as f64 / self.warmup_iters as f64;
            lr *= self.warmup_factor + (1.0 - self.warmup_factor) * t;
        }
        lr
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Input("batch_size must be positive".into()));
        }
        if !(self.base_lr > 0.0) || !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return Err(Error::Input("invalid optimiser settings".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    /// 1-based.
    pub iteration: usize,
    pub lr: f64,
    pub loss: LossBreakdown,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<IterationRecord>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("iteration,lr,total,coarse_cls,coarse_reg,border_cls,border_reg,coarse_pos,border_pos\n");
        for r in &self.records {
            let l = &r.loss;
            s.push_str(&format!(
                "{},{:e},{:.6},{:.6},{:.6},{:.6},{:.6},{},{}\n",
                r.iteration, r.lr, l.total, l.coarse_cls, l.coarse_reg, l.border_cls, l.border_reg,
                l.coarse_positives, l.border_positives
            ));
        }
        s
    }
}

/// Momentum SGD: `v = m·v + g + wd·w; w -= lr·v`.
#[derive(Debug, Clone)]
pub struct Sgd<T> {
    momentum: T,
    weight_decay: T,
    velocity: Vec<Vec<T>>,
}

impl<T: Real> Sgd<T> {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self { momentum: T::lit(momentum), weight_decay: T::lit(weight_decay), velocity: Vec::new() }
    }

    pub fn step(&mut self, model: &mut impl HasParams<T>, lr: f64) {
        let lr = T::lit(lr);
        let (m, wd) = (self.momentum, self.weight_decay);
        let mut i = 0;
        let velocity = &mut self.velocity;
        model.visit_params_mut("", &mut |slot| {
            if velocity.len() <= i {
                velocity.push(vec![T::zero(); slot.value.len()]);
            }
            for ((w, g), v) in slot.value.iter_mut().zip(slot.grad.iter()).zip(velocity[i].iter_mut()) {
                *v = m * *v + *g + wd * *w;
                *w -= lr * *v;
            }
            i += 1;
        });
        model.bump_version();
    }
}

/// Endless shuffled pass over the dataset, reshuffled every epoch.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl BatchSampler {
    pub fn new(len: usize, seed: u64) -> Self {
        let mut s = Self { order: (0..len).collect(), pos: len, rng: ChaCha8Rng::seed_from_u64(seed) };
        s.reshuffle();
        s
    }

    fn reshuffle(&mut self) {
        self.order.shuffle(&mut self.rng);
        self.pos = 0;
    }

    pub fn next_batch(&mut self, size: usize) -> Vec<usize> {
        (0..size)
            .map(|_| {
                if self.pos == self.order.len() {
                    self.reshuffle();
                }
                self.pos += 1;
                self.order[self.pos - 1]
            })
            .collect()
    }
}

/// Forward, target assignment and loss for one batch, without touching
/// parameter gradients.
pub fn evaluate_loss<T: Real>(
    model: &BorderDet<T>,
    images: &Tensor4<T>,
    gts: &[Vec<GtObject>],
    cfg: &TrainConfig,
) -> Result<(LossBreakdown, HeadOutputs<T>)> {
    let (out, _) = model.forward(images)?;
    let coarse = assign_coarse_targets(out.grid(), out.stride, gts);
    let border = assign_border_targets(&out.coarse_boxes, gts, cfg.border_iou_thresh, model.config().sigma);
    let (loss, _) = total_loss(&out, &coarse, &border, cfg.focal);
    Ok((loss, out))
}

/// Computes the loss and fills the gradient buffers (after zeroing them).
pub fn compute_gradients<T: Real>(
    model: &mut BorderDet<T>,
    images: &Tensor4<T>,
    gts: &[Vec<GtObject>],
    cfg: &TrainConfig,
) -> Result<LossBreakdown> {
    model.zero_grad();
    let (out, cache) = model.forward(images)?;
    let coarse = assign_coarse_targets(out.grid(), out.stride, gts);
    let border = assign_border_targets(&out.coarse_boxes, gts, cfg.border_iou_thresh, model.config().sigma);
    let (loss, grads) = total_loss(&out, &coarse, &border, cfg.focal);
    model.backward(&grads, &cache)?;
    Ok(loss)
}

/// Runs `cfg.iterations` SGD steps. `observer` sees the 1-based iteration,
/// the loss measured before that step's update, and the updated model.
pub fn train<T: Real>(
    model: &mut BorderDet<T>,
    data: &Dataset,
    cfg: &TrainConfig,
    mut observer: impl FnMut(&IterationRecord, &BorderDet<T>),
) -> Result<TrainLog> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Input("training set is empty".into()));
    }
    let mut sampler = BatchSampler::new(data.len(), cfg.seed);
    let mut opt = Sgd::new(cfg.momentum, cfg.weight_decay);
    let mut log = TrainLog::default();
    for iter in 0..cfg.iterations {
        let idx = sampler.next_batch(cfg.batch_size);
        let (images, gts) = data.batch::<T>(&idx)?;
        let loss = compute_gradients(model, &images, &gts, cfg)?;
        if !loss.total.is_finite() {
            return Err(Error::Input(format!("loss diverged at iteration {}", iter + 1)));
        }
        let lr = cfg.lr_at(iter);
        opt.step(model, lr);
        let rec = IterationRecord { iteration: iter + 1, lr, loss };
        observer(&rec, model);
        log.records.push(rec);
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::ModelConfig;
    use crate::training::dataset::generate_synthetic_dataset;

    #[test]
    fn schedule() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.lr_at(0), 0.01);
        assert_eq!(cfg.lr_at(1399), 0.01);
        assert!((cfg.lr_at(1400) - 0.001).abs() < 1e-15);
        assert!((cfg.lr_at(1999) - 0.0001).abs() < 1e-15);
        let warm = TrainConfig { warmup_iters: 10, ..cfg };
        assert!((warm.lr_at(0) - 0.01 / 3.0).abs() < 1e-15);
        assert_eq!(warm.lr_at(10), 0.01);
    }

    #[test]
    fn sampler_covers_each_epoch() {
        let mut s = BatchSampler::new(10, 1);
        let mut a = s.next_batch(4);
        a.extend(s.next_batch(6));
        a.sort_unstable();
        assert_eq!(a, (0..10).collect::<Vec<_>>());
    }

    fn tiny() -> (ModelConfig, Dataset) {
        let model = ModelConfig { backbone_channels: vec![4, 8, 8], cls_channels: 8, reg_channels: 4, ..Default::default() };
        (model, generate_synthetic_dataset(1, 8, 32, 2).unwrap())
    }

    #[test]
    fn first_record_is_initial_loss() {
        let (mcfg, data) = tiny();
        let cfg = TrainConfig { iterations: 2, batch_size: 4, ..Default::default() };
        let mut model = BorderDet::<f32>::new(mcfg.clone()).unwrap();
        let initial = model.clone();
        let first_batch = BatchSampler::new(data.len(), cfg.seed).next_batch(4);
        let (img, gts) = data.batch::<f32>(&first_batch).unwrap();
        let (expected, _) = evaluate_loss(&initial, &img, &gts, &cfg).unwrap();
        let log = train(&mut model, &data, &cfg, |_, _| {}).unwrap();
        assert_eq!(log.records[0].loss, expected);
    }

    #[test]
    fn reproducible() {
        let (mcfg, data) = tiny();
        let cfg = TrainConfig { iterations: 3, batch_size: 2, ..Default::default() };
        let run = || {
            let mut m = BorderDet::<f32>::new(mcfg.clone()).unwrap();
            train(&mut m, &data, &cfg, |_, _| {}).unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn sgd_update_rule() {
        use crate::layers::LayerParams;
        let mut p = LayerParams::<f64>::zeros(1, 1, 1);
        p.weight.data_mut()[0] = 1.0;
        p.grad_weight.data_mut()[0] = 0.5;
        let mut opt = Sgd::new(0.9, 0.1);
        opt.step(&mut p, 0.1);
        // v = 0.5 + 0.1 = 0.6
        assert!((p.weight.data()[0] - 0.94).abs() < 1e-15);
        opt.step(&mut p, 0.1);
        // v = 0.54 + 0.5 + 0.094
        assert!((p.weight.data()[0] - (0.94 - 0.1134)).abs() < 1e-12);
    }
}
