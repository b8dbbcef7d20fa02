//! Teacher-forced next-token training over sliding windows.

use super::model::{ArModel, Condition};
use crate::nn::layers::Bound;
use crate::codec::Vocabulary;
use crate::error::Result;
use super::ArConfig;
use crate::nn::{AdamW, Checkpoint, Graph, Grads, Var};
use crate::parallel::map_indexed;
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainItem<T> {
    pub tokens: Vec<u32>,
    pub cond: Condition<T>,
}

/// Input span `[start, end)` of one window; targets are `tokens[j + 1]` for
/// inputs `j >= counted_from`, so every target is scored exactly once, in the
/// first window whose context contains its predecessor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Window {
    pub start: usize,
    pub end: usize,
    pub counted_from: usize,
}

/// Windows over a sequence of `len` tokens (inputs are `0..len-1`).
pub fn windows(len: usize, window: usize, stride: usize) -> Vec<Window> {
    let mut out = Vec::new();
    if len < 2 {
        return out;
    }
    let last = len - 1;
    let mut start = 0;
    let mut counted_from = 0;
    loop {
        let end = (start + window).min(last);
        out.push(Window {
            start,
            end,
            counted_from,
        });
        if end == last {
            break;
        }
        counted_from = end;
        start += stride;
    }
    out
}

/// Whether each token may serve as a prediction target: start and padding
/// tokens never do; end tokens do.
pub fn target_mask(tokens: &[u32], vocab: &Vocabulary) -> Vec<bool> {
    tokens
        .iter()
        .map(|&t| t != vocab.start() && t != vocab.pad())
        .collect()
}

fn trimmed<'a>(tokens: &'a [u32], vocab: &Vocabulary) -> &'a [u32] {
    let end = tokens.iter().rposition(|&t| t != vocab.pad()).map_or(0, |i| i + 1);
    &tokens[..end]
}

/// Number of scored targets in a sequence.
pub fn count_targets(tokens: &[u32], vocab: &Vocabulary) -> usize {
    let t = trimmed(tokens, vocab);
    target_mask(t, vocab).iter().skip(1).filter(|&&m| m).count()
}

impl<T: Scalar> ArModel<T> {
    /// Summed cross-entropy of one sequence inside `g` (None if nothing is scored).
    pub(crate) fn sequence_loss_graph(&self, g: &mut Graph<T>, p: &Bound, item: &TrainItem<T>) -> Result<Option<Var>> {
        let vocab = self.cfg.vocab();
        let tokens = trimmed(&item.tokens, &vocab);
        let mask = target_mask(tokens, &vocab);
        let (cond, _) = self.condition_graph(g, p, &item.cond, false)?;
        let mut total: Option<Var> = None;
        for w in windows(tokens.len(), self.cfg.window, self.cfg.stride) {
            let targets: Vec<Option<usize>> = (w.start..w.end)
                .map(|j| (j >= w.counted_from && mask[j + 1]).then(|| tokens[j + 1] as usize))
                .collect();
            if targets.iter().all(|t| t.is_none()) {
                continue;
            }
            let (_, logits) = self.window_graph(g, p, &tokens[w.start..w.end], cond)?;
            let ce = g.cross_entropy(logits, &targets);
            total = Some(match total {
                Some(t) => g.add(t, ce),
                None => ce,
            });
        }
        Ok(total)
    }

    /// Mean next-token cross-entropy (nats per scored target) over a batch.
    pub fn loss(&self, items: &[TrainItem<T>]) -> Result<f64> {
        let mut sum = 0.0;
        let mut count = 0;
        for item in items {
            let mut g = Graph::new();
            let p = Bound::new(&mut g, &self.params);
            if let Some(l) = self.sequence_loss_graph(&mut g, &p, item)? {
                sum += g.value(l).item().to_f64_lossy();
            }
            count += count_targets(&item.tokens, &self.cfg.vocab());
        }
        Ok(if count == 0 { 0.0 } else { sum / count as f64 })
    }

    /// Mean loss and its parameter gradients. Items are processed on up to
    /// `threads` workers and reduced in item order.
    pub fn loss_and_grads(&self, items: &[TrainItem<T>], threads: usize) -> Result<(f64, Grads<T>)> {
        let vocab = self.cfg.vocab();
        let count: usize = items.iter().map(|it| count_targets(&it.tokens, &vocab)).sum();
        let mut grads = Grads::zeros_like(&self.params);
        if count == 0 {
            return Ok((0.0, grads));
        }
        let inv = T::one() / T::from_usize_lossy(count);
        let per_item = map_indexed(items.len(), threads, |i| -> Result<Option<(T, Grads<T>)>> {
            let mut g = Graph::new();
            let p = Bound::new(&mut g, &self.params);
            let Some(l) = self.sequence_loss_graph(&mut g, &p, &items[i])? else {
                return Ok(None);
            };
            let scaled = g.scale(l, inv);
            g.backward(scaled);
            let mut gi = Grads::zeros_like(&self.params);
            g.accumulate_param_grads(&mut gi);
            Ok(Some((g.value(l).item(), gi)))
        });
        let mut sum = 0.0;
        for r in per_item {
            if let Some((l, gi)) = r? {
                sum += l.to_f64_lossy();
                for id in self.params.ids() {
                    grads.get_mut(id).add_assign(gi.get(id));
                }
            }
        }
        Ok((sum / count as f64, grads))
    }

    /// One optimiser step; returns the pre-update mean loss.
    pub fn train_step(&mut self, items: &[TrainItem<T>], opt: &mut AdamW<T>, lr: f64, threads: usize) -> Result<f64> {
        let (loss, grads) = self.loss_and_grads(items, threads)?;
        opt.step(&mut self.params, &grads, lr);
        Ok(loss)
    }

    /// Teacher-forced log-probability of every scored target, summed.
    pub fn log_prob(&self, tokens: &[u32], cond: &Condition<T>) -> Result<f64> {
        let mut g = Graph::new();
        let p = Bound::new(&mut g, &self.params);
        let item = TrainItem {
            tokens: tokens.to_vec(),
            cond: cond.clone(),
        };
        Ok(match self.sequence_loss_graph(&mut g, &p, &item)? {
            Some(l) => -g.value(l).item().to_f64_lossy(),
            None => 0.0,
        })
    }
}

pub const CHECKPOINT_KIND: &str = "ar";

impl<T: Scalar> ArModel<T> {
    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint::tagged(CHECKPOINT_KIND, &self.cfg, &self.params)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let cfg: ArConfig = ckpt.config_of(CHECKPOINT_KIND)?;
        let mut model = Self::new(cfg, 0)?;
        ckpt.restore(&mut model.params)?;
        Ok(model)
    }
}
