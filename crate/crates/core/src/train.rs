//! SGD with momentum, cosine learning-rate decay, and masked updates.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{Dataset, DatasetSplit};
use crate::error::{Error, Result};
use crate::layers::cross_entropy;
use crate::model::{Model, ParamRole};

const EVAL_CHUNK: usize = 256;

/// How one parameter tensor may change in an optimizer step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Update {
    /// Neither the value nor its momentum buffer is touched.
    Skip,
    Full,
    /// Only the leading `cols` columns of a row-major `? × stride` tensor.
    Prefix {
        stride: usize,
        cols: usize,
    },
}

/// One [`Update`] per tensor, in [`Model::params`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct UpdatePlan(pub Vec<Update>);

impl UpdatePlan {
    /// Factors update only their active column prefix; any tensor for which
    /// `trainable` is false is skipped.
    pub fn new(model: &Model, ranks: Option<&[usize]>, trainable: impl Fn(&ParamRole) -> bool) -> Self {
        let plan = model
            .params()
            .iter()
            .map(|p| {
                if !trainable(&p.role) {
                    return Update::Skip;
                }
                match (&p.role, ranks) {
                    (ParamRole::SlotFactorU(id) | ParamRole::SlotFactorV(id), Some(r)) => Update::Prefix {
                        stride: p.shape[1],
                        cols: r[id.index()],
                    },
                    _ => Update::Full,
                }
            })
            .collect();
        UpdatePlan(plan)
    }

    pub fn all(model: &Model) -> Self {
        Self::new(model, None, |_| true)
    }
}

/// `lr · ½(1 + cos(π·step/total))`.
pub fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    base * 0.5 * (1.0 + (PI * step.min(total) as f64 / total as f64).cos())
}

#[derive(Debug, Clone)]
pub struct Sgd {
    pub base_lr: f64,
    pub momentum: f64,
    pub total_steps: usize,
    step: usize,
    velocity: Option<Model>,
}

impl Sgd {
    pub fn new(base_lr: f64, momentum: f64, total_steps: usize) -> Self {
        Self {
            base_lr,
            momentum,
            total_steps,
            step: 0,
            velocity: None,
        }
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    pub fn current_lr(&self) -> f64 {
        cosine_lr(self.base_lr, self.step, self.total_steps)
    }

    /// `v ← μ·v + g`, `w ← w − lr·v` on the entries allowed by `plan`.
    pub fn step(&mut self, model: &mut Model, grads: &Model, plan: &UpdatePlan) -> Result<()> {
        let lr = self.current_lr();
        let velocity = self.velocity.get_or_insert_with(|| model.zeros_like());
        let mut params = model.params_mut();
        let gparams = grads.params();
        let mut vparams = velocity.params_mut();
        if params.len() != gparams.len() || params.len() != vparams.len() || params.len() != plan.0.len() {
            return Err(Error::shape("Sgd::step", "parameter structure mismatch"));
        }
        let mu = self.momentum;
        for (((p, g), v), u) in params.iter_mut().zip(&gparams).zip(vparams.iter_mut()).zip(&plan.0) {
            if p.data.len() != g.data.len() || p.data.len() != v.data.len() {
                return Err(Error::shape("Sgd::step", format!("tensor {}", p.name)));
            }
            let len = p.data.len();
            let mut apply = |i: usize| {
                v.data[i] = mu * v.data[i] + g.data[i];
                p.data[i] -= lr * v.data[i];
            };
            match *u {
                Update::Skip => {}
                Update::Full => (0..len).for_each(&mut apply),
                Update::Prefix { stride, cols } => {
                    for row in 0..len / stride {
                        for c in 0..cols {
                            apply(row * stride + c);
                        }
                    }
                }
            }
        }
        self.step += 1;
        Ok(())
    }
}

/// Training order for one epoch: a ChaCha8 shuffle keyed by `(seed, epoch)`.
pub fn epoch_order(indices: &[usize], seed: u64, epoch: usize) -> Vec<usize> {
    let mut order = indices.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    order.shuffle(&mut rng);
    order
}

pub fn steps_per_epoch(samples: usize, batch_size: usize) -> usize {
    samples.div_ceil(batch_size)
}

#[derive(Debug, Clone)]
pub struct TrainSettings {
    pub batch_size: usize,
    pub seed: u64,
}

/// One epoch of plain cross-entropy training over `split`. Returns the loss
/// of every step.
pub fn train_epoch(
    model: &mut Model,
    ds: &Dataset,
    split: &DatasetSplit,
    opt: &mut Sgd,
    settings: &TrainSettings,
    epoch: usize,
) -> Result<Vec<f64>> {
    if split.is_empty() {
        return Err(Error::Argument("cannot train on an empty split".into()));
    }
    let order = epoch_order(&split.indices, settings.seed, epoch);
    let plan = UpdatePlan::all(model);
    let mut trace = Vec::with_capacity(steps_per_epoch(order.len(), settings.batch_size));
    for chunk in order.chunks(settings.batch_size) {
        let (imgs, labels) = ds.gather(chunk);
        let (logits, cache) = model.forward_train(&imgs, chunk.len(), None)?;
        let out = cross_entropy(&logits, &labels)?;
        if !out.loss.is_finite() {
            return Err(Error::Diverged {
                step: opt.steps_taken(),
                loss: out.loss,
            });
        }
        let mut grads = model.zeros_like();
        model.backward(&cache, &out.grad, &mut grads)?;
        opt.step(model, &grads, &plan)?;
        trace.push(out.loss);
    }
    Ok(trace)
}

/// Predicted class per sample (first maximum wins ties).
pub fn predict(model: &Model, ds: &Dataset, indices: &[usize], ranks: Option<&[usize]>) -> Result<Vec<usize>> {
    let mut preds = Vec::with_capacity(indices.len());
    for chunk in indices.chunks(EVAL_CHUNK) {
        let (imgs, _) = ds.gather(chunk);
        let logits = model.forward(&imgs, chunk.len(), ranks)?;
        for i in 0..logits.rows() {
            preds.push(argmax(logits.row(i)));
        }
    }
    Ok(preds)
}

/// Fraction of samples in `indices` whose prediction matches the label.
pub fn evaluate(model: &Model, ds: &Dataset, indices: &[usize], ranks: Option<&[usize]>) -> Result<f64> {
    if indices.is_empty() {
        return Err(Error::Argument("cannot evaluate on an empty split".into()));
    }
    let preds = predict(model, ds, indices, ranks)?;
    let correct = preds.iter().zip(indices).filter(|(&p, &i)| p == ds.label(i)).count();
    Ok(correct as f64 / indices.len() as f64)
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(cosine_lr(0.1, 0, 10), 0.1);
        assert!((cosine_lr(0.1, 5, 10) - 0.05).abs() < 1e-15);
        assert!(cosine_lr(0.1, 10, 10).abs() < 1e-15);
    }

    #[test]
    fn epoch_order_is_a_seeded_permutation() {
        let idx: Vec<usize> = (0..50).collect();
        let a = epoch_order(&idx, 3, 0);
        assert_eq!(a, epoch_order(&idx, 3, 0));
        assert_ne!(a, epoch_order(&idx, 3, 1));
        let mut sorted = a.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, idx);
    }
}
