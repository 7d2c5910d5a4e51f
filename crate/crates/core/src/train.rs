//! AdamW training with a poly learning-rate schedule.
//!
//! Update for parameter `p` with gradient `g` at step `t` (1-based):
//!
//! ```text
//! p ← p − lr_t·λ·p
//! m ← β1·m + (1−β1)·g          v ← β2·v + (1−β2)·g²
//! p ← p − lr_t·(m / (1−β1^t)) / (√(v / (1−β2^t)) + ε)
//! lr_t = lr·(1 − iter/max_iter)^power,  iter = t − 1
//! ```

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::confusion::{ConfusionMatrix, SegScores};
use crate::decoder::Trans4Trans;
use crate::error::{config_err, dim_err, validation_err, Error, Result};
use crate::nn::{seeded_rng, ParamStore};
use crate::scalar::Scalar;
use crate::synth::{ClassSets, Scene, IGNORE_INDEX};
use crate::tensor::Tensor;

/// Which head losses drive each optimiser step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadSchedule {
    /// Sum of both heads' losses on every batch.
    #[default]
    Joint,
    /// General head on even batches, transparency head on odd ones.
    Alternate,
}

impl fmt::Display for HeadSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            HeadSchedule::Joint => "joint",
            HeadSchedule::Alternate => "alternate",
        })
    }
}

impl FromStr for HeadSchedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "joint" => Ok(HeadSchedule::Joint),
            "alternate" => Ok(HeadSchedule::Alternate),
            other => Err(config_err!("unknown head schedule {other:?} (expected joint|alternate)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub poly_power: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub head_schedule: HeadSchedule,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            poly_power: 0.9,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            epochs: 100,
            batch_size: 4,
            seed: 0,
            head_schedule: HeadSchedule::Joint,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(config_err!("lr must be positive, got {}", self.lr));
        }
        if !(self.poly_power >= 0.0) || !(self.weight_decay >= 0.0) || !(self.eps > 0.0) {
            return Err(config_err!("poly_power and weight_decay must be non-negative, eps positive"));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(config_err!("{name} = {b} outside [0, 1)"));
            }
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(config_err!("epochs and batch_size must be at least 1"));
        }
        Ok(())
    }
}

/// `lr·(1 − iter/max_iter)^power`, clamped at zero past the end.
pub fn poly_lr(lr: f64, iter: usize, max_iter: usize, power: f64) -> f64 {
    if max_iter == 0 {
        return lr;
    }
    let frac = (1.0 - iter as f64 / max_iter as f64).max(0.0);
    lr * frac.powf(power)
}

/// Decoupled-weight-decay Adam state for one parameter store.
#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(params: &ParamStore<T>, cfg: &TrainConfig) -> Self {
        let zeros = || params.iter().map(|p| vec![T::zero(); p.value.numel()]).collect();
        Self {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            weight_decay: cfg.weight_decay,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update with learning rate `lr`; `grads` is aligned with the store.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &[Tensor<T>], lr: f64) -> Result<()> {
        if grads.len() != params.len() {
            return Err(dim_err!("{} gradients for {} parameters", grads.len(), params.len()));
        }
        self.step += 1;
        let t = self.step as i32;
        let c = |x: f64| T::from_f64_lossy(x);
        let (b1, b2) = (c(self.beta1), c(self.beta2));
        let bc1 = c(1.0 - self.beta1.powi(t));
        let bc2 = c(1.0 - self.beta2.powi(t));
        let decay = c(1.0 - lr * self.weight_decay);
        let (lr, eps) = (c(lr), c(self.eps));
        let ids: Vec<_> = params.ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            let g = grads[i].data();
            let p = params.get_mut(id).data_mut();
            if g.len() != p.len() {
                return Err(dim_err!("gradient {i} has {} entries, parameter {}", g.len(), p.len()));
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..p.len() {
                m[j] = b1 * m[j] + (T::one() - b1) * g[j];
                v[j] = b2 * v[j] + (T::one() - b2) * g[j] * g[j];
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                p[j] = p[j] * decay - lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// A training image with model-index targets ([`IGNORE_INDEX`] skipped).
#[derive(Clone, Debug)]
pub struct Sample<T> {
    pub image: Tensor<T>,
    pub general: Vec<usize>,
    pub trans: Vec<usize>,
}

impl<T: Scalar> Sample<T> {
    pub fn from_scene(scene: &Scene, classes: &ClassSets) -> Self {
        Self {
            image: scene.rgb.to_tensor(),
            general: scene.general.data.iter().map(|&c| classes.general_to_model(c) as usize).collect(),
            trans: scene.trans.data.iter().map(|&c| classes.trans_to_model(c) as usize).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadLog {
    pub loss: f64,
    pub pixel_accuracy: f64,
    pub miou: f64,
}

/// Per-epoch record, written as one JSON line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub general: HeadLog,
    pub trans: Option<HeadLog>,
    pub wall_time_ms: f64,
}

struct HeadAcc {
    loss_sum: f64,
    batches: usize,
    cm: ConfusionMatrix,
}

impl HeadAcc {
    fn new(k: usize) -> Self {
        Self { loss_sum: 0.0, batches: 0, cm: ConfusionMatrix::new(k) }
    }

    fn finish(&self) -> HeadLog {
        let SegScores { pixel_accuracy, miou } = self.cm.scores();
        let loss = if self.batches == 0 { 0.0 } else { self.loss_sum / self.batches as f64 };
        HeadLog { loss, pixel_accuracy, miou }
    }
}

/// Runs `cfg.epochs` epochs over `data`, calling `on_epoch` after each.
/// Metrics are accumulated on the fly from the pre-update predictions.
pub fn train<T: Scalar>(
    model: &mut Trans4Trans<T>,
    data: &[Sample<T>],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<Vec<EpochLog>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(validation_err!("training set is empty"));
    }
    let dual = model.trans.is_some();
    let batches_per_epoch = data.len().div_ceil(cfg.batch_size);
    let max_iter = cfg.epochs * batches_per_epoch;
    let mut opt = AdamW::new(&model.params, cfg);
    let mut rng = seeded_rng(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut logs = Vec::with_capacity(cfg.epochs);
    let mut iter = 0;
    let ignore = IGNORE_INDEX as usize;

    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        order.shuffle(&mut rng);
        let mut gacc = HeadAcc::new(model.general.num_classes());
        let mut tacc = model.trans.as_ref().map(|d| HeadAcc::new(d.num_classes()));
        let mut lr = poly_lr(cfg.lr, iter, max_iter, cfg.poly_power);

        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let (use_general, use_trans) = match cfg.head_schedule {
                HeadSchedule::Joint => (true, dual),
                HeadSchedule::Alternate if dual => (b % 2 == 0, b % 2 == 1),
                HeadSchedule::Alternate => (true, false),
            };
            let scale = T::from_f64_lossy(1.0 / batch.len() as f64);
            let mut grads: Vec<Tensor<T>> = Vec::new();
            let (mut gl, mut tl) = (0.0, 0.0);
            for &i in batch {
                let s = &data[i];
                let g = Graph::new();
                let p = model.params.bind(&g);
                let x = g.constant(s.image.clone());
                let out = model.forward(&g, &p, &x)?;
                let lg = g.cross_entropy(&out.heads[0].logits, &s.general, ignore)?;
                gl += lg.value().item()?.to_f64_lossy();
                gacc.cm.add(&out.heads[0].logits.value().argmax_channels()?, &s.general, ignore)?;
                let mut loss = if use_general { Some(lg) } else { None };
                if let (Some(acc), Some(head)) = (tacc.as_mut(), out.heads.get(1)) {
                    let lt = g.cross_entropy(&head.logits, &s.trans, ignore)?;
                    tl += lt.value().item()?.to_f64_lossy();
                    acc.cm.add(&head.logits.value().argmax_channels()?, &s.trans, ignore)?;
                    if use_trans {
                        loss = Some(match loss {
                            Some(l) => g.add(&l, &lt)?,
                            None => lt,
                        });
                    }
                }
                let loss = g.scale(&loss.expect("at least one head is trained"), scale);
                let value = loss.value().item()?.to_f64_lossy();
                if !value.is_finite() {
                    return Err(validation_err!("non-finite loss {value} at epoch {epoch}, iteration {iter}"));
                }
                let gr = g.backward(&loss)?;
                if grads.is_empty() {
                    grads = p.iter().map(|(_, v)| gr.get_or_zeros(v)).collect();
                } else {
                    for ((_, v), acc) in p.iter().zip(grads.iter_mut()) {
                        if let Some(d) = gr.get(v) {
                            acc.add_assign(d);
                        }
                    }
                }
            }
            gacc.loss_sum += gl / batch.len() as f64;
            gacc.batches += 1;
            if let Some(acc) = tacc.as_mut() {
                acc.loss_sum += tl / batch.len() as f64;
                acc.batches += 1;
            }
            lr = poly_lr(cfg.lr, iter, max_iter, cfg.poly_power);
            opt.step(&mut model.params, &grads, lr)?;
            iter += 1;
        }

        let general = gacc.finish();
        let trans = tacc.map(|a| a.finish());
        let log = EpochLog {
            epoch,
            lr,
            loss: general.loss + trans.as_ref().map_or(0.0, |t| t.loss),
            general,
            trans,
            wall_time_ms: started.elapsed().as_secs_f64() * 1e3,
        };
        on_epoch(&log);
        logs.push(log);
    }
    Ok(logs)
}

/// Confusion matrices of each head over `data` in inference mode.
pub fn evaluate<T: Scalar>(model: &Trans4Trans<T>, data: &[Sample<T>]) -> Result<Vec<ConfusionMatrix>> {
    let mut cms: Vec<ConfusionMatrix> = model.decoders().map(|d| ConfusionMatrix::new(d.num_classes())).collect();
    for s in data {
        for (k, logits) in model.infer(&s.image)?.iter().enumerate() {
            let target = if k == 0 { &s.general } else { &s.trans };
            cms[k].add(&logits.argmax_channels()?, target, IGNORE_INDEX as usize)?;
        }
    }
    Ok(cms)
}
