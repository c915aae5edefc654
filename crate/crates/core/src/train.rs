//! AdamW with global-norm clipping and a warmup + cosine schedule.
//!
//! A step computes each sequence's gradient into its own scratch store and
//! sums the stores in batch order, so the update is bitwise the same whether
//! the per-sequence work runs sequentially or in parallel.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::model::{
    layer_prefix, ordered_total, sequence_grad, target_count, ModelConfig, ModelOverrides, Sample,
    SeqOutcome,
};
use crate::params::ParamStore;
use crate::real::Real;
use crate::router::Route;

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct TrainConfig {
    /// Peak learning rate, reached at the end of warmup.
    pub lr: f64,
    pub lr_init: f64,
    /// Floor of the cosine decay.
    pub lr_min: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub batch: usize,
    pub seq_len: usize,
    pub grad_clip: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 3e-4,
            lr_init: 0.0,
            lr_min: 3e-5,
            beta1: 0.9,
            beta2: 0.95,
            adam_eps: 1e-8,
            weight_decay: 0.1,
            warmup_steps: 100,
            total_steps: 1000,
            batch: 8,
            seq_len: 256,
            grad_clip: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, chunk: usize) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.seq_len == 0 || self.seq_len % chunk != 0 {
            return bad(format!(
                "train.seq_len {} must be a positive multiple of chunk {chunk}",
                self.seq_len
            ));
        }
        if self.batch == 0 {
            return bad(String::from("train.batch must be positive"));
        }
        if !(self.lr > 0.0 && self.lr_init >= 0.0 && self.lr_min >= 0.0) {
            return bad(String::from(
                "train.lr must be positive and lr_init, lr_min non-negative",
            ));
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return bad(String::from(
                "train.beta1 and train.beta2 must lie in [0, 1)",
            ));
        }
        if !(self.adam_eps > 0.0 && self.weight_decay >= 0.0 && self.grad_clip > 0.0) {
            return bad(String::from(
                "train.adam_eps and train.grad_clip must be positive, weight_decay non-negative",
            ));
        }
        if self.warmup_steps > self.total_steps {
            return bad(String::from("train.warmup_steps exceeds train.total_steps"));
        }
        Ok(())
    }

    /// Learning rate at 0-based `step`: linear warmup from `lr_init` to `lr`,
    /// then cosine down to `lr_min` at `total_steps`.
    pub fn lr_at(&self, step: u64) -> f64 {
        if step < self.warmup_steps {
            return self.lr_init
                + (self.lr - self.lr_init) * step as f64 / self.warmup_steps as f64;
        }
        let span = self.total_steps.saturating_sub(self.warmup_steps);
        if span == 0 {
            return self.lr;
        }
        let t = ((step - self.warmup_steps) as f64 / span as f64).min(1.0);
        let cos = num_traits::Float::cos(core::f64::consts::PI * t);
        self.lr_min + 0.5 * (self.lr - self.lr_min) * (1.0 + cos)
    }
}

/// First and second moments for every parameter, in store order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW<T> {
    pub step: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Real> AdamW<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        let m: Vec<Vec<T>> = params
            .iter()
            .map(|(_, p)| alloc::vec![T::zero(); p.value.len()])
            .collect();
        AdamW {
            step: 0,
            v: m.clone(),
            m,
        }
    }

    /// One update with the gradients currently in `params`. Decay applies to
    /// matrices only (rank ≥ 2), not to gains and biases.
    pub fn update(&mut self, params: &mut ParamStore<T>, cfg: &TrainConfig, lr: f64) -> Result<()> {
        if self.m.len() != params.len() {
            return Err(Error::StaleState(
                "optimizer state has another parameter count",
            ));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - num_traits::Float::powi(cfg.beta1, t);
        let bc2 = 1.0 - num_traits::Float::powi(cfg.beta2, t);
        let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
        let (lr_t, eps) = (T::lit(lr), T::lit(cfg.adam_eps));
        let (inv_bc1, inv_bc2) = (T::lit(1.0 / bc1), T::lit(1.0 / bc2));
        let decay = T::lit(1.0 - lr * cfg.weight_decay);
        for (i, (_, p)) in params.iter_mut().enumerate() {
            let decays = p.value.rank() >= 2;
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let grad = p.grad.data();
            for (j, w) in p.value.data_mut().iter_mut().enumerate() {
                let g = grad[j];
                m[j] = b1 * m[j] + (T::one() - b1) * g;
                v[j] = b2 * v[j] + (T::one() - b2) * g * g;
                let mh = m[j] * inv_bc1;
                let vh = v[j] * inv_bc2;
                if decays {
                    *w *= decay;
                }
                *w -= lr_t * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Gradient of one sequence, held apart from the shared parameters.
#[derive(Debug, Clone)]
pub struct SeqGrad<T> {
    pub grads: ParamStore<T>,
    pub outcome: SeqOutcome<T>,
}

/// Gradient of `scale · loss_sum` for one sequence, in a fresh scratch store.
pub fn sequence_grad_scratch<T: Real>(
    cfg: &ModelConfig,
    params: &ParamStore<T>,
    sample: &Sample,
    scale: T,
    overrides: &ModelOverrides<T>,
) -> Result<SeqGrad<T>> {
    let mut scratch = params.clone();
    scratch.zero_grads();
    let outcome = sequence_grad(cfg, &mut scratch, sample, scale, overrides)?;
    Ok(SeqGrad {
        grads: scratch,
        outcome,
    })
}

/// What one step reports.
#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub step: u64,
    pub loss: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    pub lr: f64,
    /// Fraction of softmax-routed (group, chunk) pairs per layer, over the batch.
    pub softmax_fraction: Vec<f64>,
}

/// `1 / (number of targets)` for a batch, rejecting batches with none.
pub fn batch_scale<T: Real>(batch: &[Sample]) -> Result<(T, usize)> {
    let count = target_count(batch);
    if count == 0 {
        return Err(Error::NoTargets);
    }
    Ok((T::one() / T::from_usize(count), count))
}

/// Reduces per-sequence results in batch order, clips, and applies AdamW.
/// `results` must follow batch order.
pub fn apply_step<T: Real>(
    cfg: &ModelConfig,
    params: &mut ParamStore<T>,
    opt: &mut AdamW<T>,
    results: Vec<SeqGrad<T>>,
    count: usize,
) -> Result<StepReport> {
    let step = opt.step;
    params.zero_grads();
    let mut sums = Vec::with_capacity(results.len());
    let mut routed = alloc::vec![(0usize, 0usize); cfg.n_layers];
    for r in &results {
        params.accumulate_grads(&r.grads)?;
        sums.push(r.outcome.loss_sum);
        for (l, routing) in r.outcome.routings.iter().enumerate() {
            routed[l].0 += routing.count(Route::Softmax);
            routed[l].1 += routing.choices().len();
        }
    }
    let softmax_fraction: Vec<f64> = routed
        .iter()
        .map(|&(s, n)| if n == 0 { 0.0 } else { s as f64 / n as f64 })
        .collect();
    let loss = (ordered_total(&sums) / T::from_usize(count)).to_f64_lossy();
    let grad_norm = params.grad_norm().to_f64_lossy();
    if !loss.is_finite() || !grad_norm.is_finite() {
        return Err(Error::Diverged {
            step,
            detail: diagnostics(cfg, params, loss, &softmax_fraction),
        });
    }
    if grad_norm > cfg.train.grad_clip {
        params.scale_grads(T::lit(cfg.train.grad_clip / grad_norm));
    }
    let lr = cfg.train.lr_at(step);
    opt.update(params, &cfg.train, lr)?;
    Ok(StepReport {
        step,
        loss,
        grad_norm,
        lr,
        softmax_fraction,
    })
}

fn diagnostics<T: Real>(
    cfg: &ModelConfig,
    params: &ParamStore<T>,
    loss: f64,
    fractions: &[f64],
) -> String {
    let mut out = format!("loss={loss}");
    for l in 0..cfg.n_layers {
        let prefix = layer_prefix(l);
        let sq: f64 = params
            .iter()
            .filter(|(n, _)| n.starts_with(prefix.as_str()))
            .map(|(_, p)| {
                p.grad
                    .data()
                    .iter()
                    .map(|g| g.to_f64_lossy() * g.to_f64_lossy())
                    .sum::<f64>()
            })
            .sum();
        out.push_str(&format!(
            "; layer {l}: grad_norm={} softmax_fraction={}",
            num_traits::Float::sqrt(sq),
            fractions.get(l).copied().unwrap_or(0.0)
        ));
    }
    out
}

/// One sequential training step.
pub fn train_step<T: Real>(
    cfg: &ModelConfig,
    params: &mut ParamStore<T>,
    opt: &mut AdamW<T>,
    batch: &[Sample],
    overrides: &ModelOverrides<T>,
) -> Result<StepReport> {
    let (scale, count) = batch_scale::<T>(batch)?;
    let mut results = Vec::with_capacity(batch.len());
    for s in batch {
        results.push(sequence_grad_scratch(cfg, params, s, scale, overrides)?);
    }
    apply_step(cfg, params, opt, results, count)
}
