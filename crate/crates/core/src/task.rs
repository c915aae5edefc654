//! Synthetic sequence tasks.
//!
//! Vocabulary layout: `PAD`, `SEP`, then `key_vocab` key tokens, then
//! `val_vocab` value tokens. Targets use [`IGNORE_INDEX`] wherever no
//! prediction is scored.

use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::Sample;
use crate::numerics::loss::IGNORE_INDEX;
use crate::real::Real;
use crate::tensor::Tensor;

pub const PAD: u32 = 0;
pub const SEP: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum TaskKind {
    /// `k₁ v₁ … kₙ vₙ SEP q₁ q₂ …`: each query is a stored key; the target at
    /// a query position is its value.
    #[default]
    MqarRecall,
    /// `x₁ … xₙ SEP x₁ … xₙ`: after `SEP`, predict the next symbol of the copy.
    Copy,
    /// A random pattern of `n_pairs` values repeated to the end; every
    /// position after the first repeat predicts the next symbol.
    Induction,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub n_pairs: usize,
    pub key_vocab: usize,
    pub val_vocab: usize,
    pub seq_len: usize,
    pub seed: u64,
}

impl Default for TaskSpec {
    fn default() -> Self {
        TaskSpec {
            kind: TaskKind::MqarRecall,
            n_pairs: 16,
            key_vocab: 64,
            val_vocab: 64,
            seq_len: 256,
            seed: 0,
        }
    }
}

impl TaskSpec {
    /// Model vocabulary needed by this task.
    pub fn vocab(&self) -> usize {
        2 + self.key_vocab + self.val_vocab
    }

    pub fn key_token(&self, i: usize) -> u32 {
        (2 + i) as u32
    }

    pub fn value_token(&self, i: usize) -> u32 {
        (2 + self.key_vocab + i) as u32
    }

    /// Token range of the value vocabulary.
    pub fn value_range(&self) -> core::ops::Range<usize> {
        2 + self.key_vocab..2 + self.key_vocab + self.val_vocab
    }

    /// Positions the task needs at minimum.
    pub fn needed_len(&self) -> usize {
        match self.kind {
            TaskKind::MqarRecall => 2 * self.n_pairs + 2,
            TaskKind::Copy => 2 * self.n_pairs + 1,
            TaskKind::Induction => 2 * self.n_pairs + 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_pairs == 0 || self.val_vocab == 0 {
            return Err(Error::Config(alloc::string::String::from(
                "task.n_pairs and task.val_vocab must be positive",
            )));
        }
        if self.kind == TaskKind::MqarRecall && self.key_vocab < self.n_pairs {
            return Err(Error::Config(alloc::format!(
                "task.key_vocab {} cannot hold {} distinct keys",
                self.key_vocab,
                self.n_pairs
            )));
        }
        if self.seq_len < self.needed_len() {
            return Err(Error::Capacity {
                needed: self.needed_len(),
                available: self.seq_len,
            });
        }
        Ok(())
    }
}

/// Sample number `index` of the stream defined by `spec.seed`.
pub fn gen_task(spec: &TaskSpec, index: u64) -> Result<Sample> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index);
    let len = spec.seq_len;
    let mut tokens = Vec::with_capacity(len);
    let mut targets = Vec::with_capacity(len);
    match spec.kind {
        TaskKind::MqarRecall => {
            let mut keys: Vec<usize> = (0..spec.key_vocab).collect();
            keys.partial_shuffle(&mut rng, spec.n_pairs);
            keys.truncate(spec.n_pairs);
            let vals: Vec<usize> = (0..spec.n_pairs)
                .map(|_| rng.gen_range(0..spec.val_vocab))
                .collect();
            for (&k, &v) in keys.iter().zip(&vals) {
                tokens.extend([spec.key_token(k), spec.value_token(v)]);
                targets.extend([IGNORE_INDEX, IGNORE_INDEX]);
            }
            tokens.push(SEP);
            targets.push(IGNORE_INDEX);
            while tokens.len() < len {
                let i = rng.gen_range(0..spec.n_pairs);
                tokens.push(spec.key_token(keys[i]));
                targets.push(spec.value_token(vals[i]) as i64);
            }
        }
        TaskKind::Copy => {
            let xs: Vec<u32> = (0..spec.n_pairs)
                .map(|_| spec.value_token(rng.gen_range(0..spec.val_vocab)))
                .collect();
            tokens.extend_from_slice(&xs);
            targets.extend(core::iter::repeat(IGNORE_INDEX).take(xs.len()));
            tokens.push(SEP);
            targets.push(xs[0] as i64);
            for i in 0..xs.len() {
                tokens.push(xs[i]);
                targets.push(xs.get(i + 1).map_or(IGNORE_INDEX, |&t| t as i64));
            }
            while tokens.len() < len {
                tokens.push(PAD);
                targets.push(IGNORE_INDEX);
            }
        }
        TaskKind::Induction => {
            let n = spec.n_pairs;
            let xs: Vec<u32> = (0..n)
                .map(|_| spec.value_token(rng.gen_range(0..spec.val_vocab)))
                .collect();
            for i in 0..len {
                tokens.push(xs[i % n]);
            }
            for i in 0..len {
                let scored = i + 1 >= n && i + 1 < len;
                targets.push(if scored {
                    tokens[i + 1] as i64
                } else {
                    IGNORE_INDEX
                });
            }
        }
    }
    Ok(Sample { tokens, targets })
}

/// `count` consecutive samples starting at stream index `first`.
pub fn gen_batch(spec: &TaskSpec, first: u64, count: usize) -> Result<Vec<Sample>> {
    (0..count as u64)
        .map(|i| gen_task(spec, first + i))
        .collect()
}

/// Correct and scored counts, predicting by argmax over the value tokens only.
pub fn accuracy<T: Real>(
    logits: &Tensor<T>,
    targets: &[i64],
    spec: &TaskSpec,
) -> Result<(usize, usize)> {
    if logits.rank() != 2 || logits.rows() != targets.len() || logits.last_dim() < spec.vocab() {
        return Err(Error::shape(
            "accuracy",
            logits.shape(),
            &[targets.len(), spec.vocab()],
        ));
    }
    let range = spec.value_range();
    let (mut correct, mut total) = (0, 0);
    for (r, &t) in targets.iter().enumerate() {
        if t == IGNORE_INDEX {
            continue;
        }
        let row = &logits.row(r)[range.clone()];
        let mut best = 0;
        for (i, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = i;
            }
        }
        total += 1;
        if (range.start + best) as i64 == t {
            correct += 1;
        }
    }
    Ok((correct, total))
}

/// Targets scored by a sample.
pub fn scored_positions(sample: &Sample) -> Vec<usize> {
    let mut v = vec![];
    for (i, &t) in sample.targets.iter().enumerate() {
        if t != IGNORE_INDEX {
            v.push(i);
        }
    }
    v
}
