//! Glue between the dataset and the two training stages.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ar::{ArModel, Condition, TrainItem};
use crate::decoder::{DecoderItem, GaussianDecoder};
use crate::error::{Error, Result};
use crate::losses::{LossWeights, NoPerceptual};
use crate::nn::{AdamW, AdamWConfig, Tensor};
use crate::scalar::Scalar;
use crate::synth::{Dataset, IdentityRecord};

/// Optimiser schedule: linear warmup, then cosine decay to
/// `lr · final_lr_fraction`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Schedule {
    pub steps: usize,
    pub lr: f64,
    /// Items per step; 0 uses every item.
    pub batch: usize,
    pub weight_decay: f64,
    pub warmup: usize,
    pub final_lr_fraction: f64,
    pub clip_norm: f64,
    /// Log every this many steps; 0 disables.
    pub log_every: usize,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            steps: 1000,
            lr: 3e-4,
            batch: 8,
            weight_decay: 0.01,
            warmup: 50,
            final_lr_fraction: 0.1,
            clip_norm: 1.0,
            log_every: 50,
        }
    }
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(format!("schedule: {m}")));
        if !(self.lr > 0.0) || self.weight_decay < 0.0 || self.clip_norm < 0.0 {
            return bad("lr must be positive; weight_decay and clip_norm non-negative");
        }
        if !(0.0..=1.0).contains(&self.final_lr_fraction) {
            return bad("final_lr_fraction must lie in [0, 1]");
        }
        Ok(())
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup {
            return self.lr * (step + 1) as f64 / self.warmup as f64;
        }
        let span = self.steps.saturating_sub(self.warmup).max(1);
        let t = ((step - self.warmup) as f64 / span as f64).min(1.0);
        let floor = self.lr * self.final_lr_fraction;
        floor + (self.lr - floor) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
    }

    fn optimizer<T: Scalar>(&self, store: &crate::nn::ParamStore<T>) -> AdamW<T> {
        AdamW::new(
            AdamWConfig {
                lr: self.lr,
                weight_decay: self.weight_decay,
                clip_norm: self.clip_norm,
                ..AdamWConfig::default()
            },
            store,
        )
    }
}

/// Deterministic minibatches: reshuffled every epoch from `seed`.
struct Batches {
    rng: ChaCha8Rng,
    order: Vec<usize>,
    pos: usize,
    size: usize,
}

impl Batches {
    fn new(n: usize, size: usize, seed: u64) -> Self {
        let size = if size == 0 { n } else { size.min(n) };
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            order: (0..n).collect(),
            pos: n,
            size,
        }
    }

    fn next(&mut self) -> Vec<usize> {
        if self.size == self.order.len() {
            return self.order.clone();
        }
        let mut out = Vec::with_capacity(self.size);
        while out.len() < self.size {
            if self.pos == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

pub fn condition<T: Scalar>(ds: &Dataset, rec: &IdentityRecord) -> Condition<T> {
    Condition {
        image: rec.cond.cast(),
        vertices: ds.template.vertices.iter().map(|v| v.cast()).collect(),
    }
}

pub fn ar_items<T: Scalar>(ds: &Dataset, seeds: &[u64]) -> Result<Vec<TrainItem<T>>> {
    seeds
        .iter()
        .map(|&s| {
            let rec = ds.identity(s)?;
            Ok(TrainItem {
                tokens: rec.tokens.tokens.clone(),
                cond: condition(ds, &rec),
            })
        })
        .collect()
}

/// Trains `model` in place; returns the loss of every step.
pub fn train_ar<T: Scalar>(
    model: &mut ArModel<T>,
    items: &[TrainItem<T>],
    sched: &Schedule,
    seed: u64,
    threads: usize,
) -> Result<Vec<f64>> {
    sched.validate()?;
    if items.is_empty() {
        return Err(Error::InvalidConfig("no training sequences".into()));
    }
    let mut opt = sched.optimizer(&model.params);
    let mut batches = Batches::new(items.len(), sched.batch, seed);
    let mut history = Vec::with_capacity(sched.steps);
    for step in 0..sched.steps {
        let batch: Vec<TrainItem<T>> = batches.next().into_iter().map(|i| items[i].clone()).collect();
        let loss = model.train_step(&batch, &mut opt, sched.lr_at(step), threads)?;
        if sched.log_every > 0 && (step % sched.log_every == 0 || step + 1 == sched.steps) {
            log::info!("step {step}/{} loss {loss:.4}", sched.steps);
        }
        history.push(loss);
    }
    Ok(history)
}

/// Which target views feed decoder training or evaluation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ViewSelection {
    pub cameras: Vec<usize>,
    pub frame: usize,
}

/// Decoder inputs for one identity from its ground-truth cloud: bin-center
/// points, teacher-forced AR hidden states (when the variant uses them) and
/// the selected posed target views.
pub fn decoder_item<T: Scalar>(
    ds: &Dataset,
    rec: &IdentityRecord,
    ar: Option<&ArModel<T>>,
    views: &ViewSelection,
    with_image: bool,
) -> Result<DecoderItem<T>> {
    let points = rec.cloud.positions().iter().map(|p| p.cast()).collect();
    let hidden = match ar {
        Some(ar) => ar.hidden_states(&condition(ds, rec), &rec.tokens)?,
        None => Tensor::zeros(0, 0),
    };
    let views = views
        .cameras
        .iter()
        .map(|&c| {
            let cam = ds
                .cameras
                .get(c)
                .ok_or_else(|| Error::InvalidConfig(format!("camera {c} not in the dataset")))?;
            Ok((cam.cast(), ds.view(rec.seed, c, views.frame)?.cast()))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DecoderItem {
        points,
        hidden,
        image: with_image.then(|| rec.cond.cast()),
        views,
    })
}

/// Trains the decoder in place; returns the loss of every step.
pub fn train_decoder<T: Scalar>(
    dec: &mut GaussianDecoder<T>,
    items: &[DecoderItem<T>],
    weights: &LossWeights,
    sched: &Schedule,
    seed: u64,
    threads: usize,
) -> Result<Vec<f64>> {
    sched.validate()?;
    weights.validate()?;
    if items.is_empty() {
        return Err(Error::InvalidConfig("no decoder training items".into()));
    }
    let mut opt = sched.optimizer(&dec.params);
    let mut batches = Batches::new(items.len(), sched.batch, seed);
    let mut history = Vec::with_capacity(sched.steps);
    for step in 0..sched.steps {
        let batch: Vec<DecoderItem<T>> = batches.next().into_iter().map(|i| items[i].clone()).collect();
        let loss = dec.train_step(&batch, weights, &NoPerceptual, &mut opt, sched.lr_at(step), threads)?;
        if sched.log_every > 0 && (step % sched.log_every == 0 || step + 1 == sched.steps) {
            log::info!("step {step}/{} loss {loss:.4}", sched.steps);
        }
        history.push(loss);
    }
    Ok(history)
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        // ties share their mean rank
        let mean = (i + j) as f64 / 2.0;
        for &k in &idx[i..=j] {
            r[k] = mean;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation (Pearson on tie-averaged ranks).
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch {
            expected: a.len(),
            got: b.len(),
        });
    }
    if a.len() < 2 {
        return Err(Error::InvalidConfig("spearman needs at least two pairs".into()));
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        cov += (x - ma) * (y - mb);
        va += (x - ma).powi(2);
        vb += (y - mb).powi(2);
    }
    if va == 0.0 || vb == 0.0 {
        return Ok(0.0);
    }
    Ok(cov / (va * vb).sqrt())
}
