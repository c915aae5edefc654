//! Independent reference implementations shared by the integration tests.
//!
//! Everything here is written directly from the definitions, one token and
//! one entry at a time, without calling the kernels under test.

#![allow(dead_code)]

use hybrid_attn_core::{ChunkRouting, Route, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `|a − b| / max(|a|, |b|, floor)`.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Central difference of `f` at `x` with step `h`.
pub fn central(f: impl Fn(f64) -> f64, x: f64, h: f64) -> f64 {
    (f(x + h) - f(x - h)) / (2.0 * h)
}

pub fn random_routing(n_groups: usize, n_chunks: usize, r: &mut impl Rng) -> ChunkRouting<f64> {
    let choice = (0..n_groups * n_chunks)
        .map(|_| {
            if r.gen_bool(0.5) {
                Route::Softmax
            } else {
                Route::Linear
            }
        })
        .collect();
    ChunkRouting::from_choices(n_groups, n_chunks, choice).unwrap()
}

/// Causal attention where entry `(h, i, j)` carries a continuous weight
/// `m = weight(h, i, j)`: `P_ij ∝ m · exp(q_i·k_j/√d)`, entries with `m = 0`
/// excluded. Inputs are `[L × h × d]`.
pub fn weighted_attention(
    q: &Tensor<f64>,
    k: &Tensor<f64>,
    v: &Tensor<f64>,
    weight: &dyn Fn(usize, usize, usize) -> f64,
) -> Tensor<f64> {
    let (len, heads, d) = (q.shape()[0], q.shape()[1], q.shape()[2]);
    let mut out = Tensor::zeros(q.shape());
    for h in 0..heads {
        for i in 0..len {
            let logits: Vec<f64> = (0..=i)
                .map(|j| {
                    (0..d)
                        .map(|x| q.get(&[i, h, x]) * k.get(&[j, h, x]))
                        .sum::<f64>()
                        / (d as f64).sqrt()
                })
                .collect();
            let top = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let w: Vec<f64> = (0..=i)
                .map(|j| weight(h, i, j) * (logits[j] - top).exp())
                .collect();
            let z: f64 = w.iter().sum();
            for (j, wj) in w.iter().enumerate() {
                for x in 0..d {
                    let cur = out.get(&[i, h, x]);
                    out.set(&[i, h, x], cur + wj / z * v.get(&[j, h, x]));
                }
            }
        }
    }
    out
}

/// 0/1 weight of the routing mask: earlier chunks visible when active for the
/// head's group, the query's own chunk visible causally.
pub fn mask_weight<'a>(
    active: &'a [bool],
    n_chunks: usize,
    chunk: usize,
    group_of_head: &[usize],
) -> impl Fn(usize, usize, usize) -> f64 + 'a {
    let group_of_head = group_of_head.to_vec();
    move |h, i, j| {
        let (qc, kc) = (i / chunk, j / chunk);
        if kc == qc || active[group_of_head[h] * n_chunks + kc] {
            1.0
        } else {
            0.0
        }
    }
}

/// Gated DeltaNet inputs for `heads` heads.
pub struct GdnCase {
    pub q: Tensor<f64>,
    pub k: Tensor<f64>,
    pub v: Tensor<f64>,
    pub alpha: Tensor<f64>,
    pub beta: Tensor<f64>,
}

impl GdnCase {
    pub fn random(len: usize, heads: usize, d: usize, seed: u64) -> Self {
        let mut r = rng(seed);
        let q = Tensor::randn(&[len, heads, d], 1.0, &mut r);
        let mut k = Tensor::randn(&[len, heads, d], 1.0, &mut r);
        for row in k.data_mut().chunks_exact_mut(d) {
            let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            row.iter_mut().for_each(|x| *x /= n);
        }
        GdnCase {
            q,
            k,
            v: Tensor::randn(&[len, heads, d], 1.0, &mut r),
            alpha: Tensor::rand_uniform(&[len, heads], 0.8, 1.0, &mut r),
            beta: Tensor::rand_uniform(&[len, heads], 0.05, 0.95, &mut r),
        }
    }

    /// The same values after a round trip through `f32`.
    pub fn rounded_to_f32(&self) -> Self {
        let r = |t: &Tensor<f64>| t.cast::<f32>().cast::<f64>();
        GdnCase {
            q: r(&self.q),
            k: r(&self.k),
            v: r(&self.v),
            alpha: r(&self.alpha),
            beta: r(&self.beta),
        }
    }
}

/// Token-by-token Gated DeltaNet with per-chunk continuous write gates.
///
/// Inside chunk `t` every output follows `S ← α(S − β(Sk)kᵀ) + βvkᵀ`,
/// `o = S q` from the state entering the chunk. The state leaving the chunk is
/// `B + γ_t (S_end − B)` with `B = (Πα)·S_enter` when `decay_base`, else
/// `S_enter`. `γ = 1` is a linear-routed chunk, `γ = 0` a softmax-routed one.
/// `gates` is `[h × n_chunks]`. Returns outputs `[L × h × d]` and the final
/// state `[h × d × d]` (value-major).
pub fn gdn_reference(
    c: &GdnCase,
    chunk: usize,
    gates: &[f64],
    decay_base: bool,
) -> (Tensor<f64>, Vec<f64>) {
    let (len, heads, d) = (c.q.shape()[0], c.q.shape()[1], c.q.shape()[2]);
    let n_chunks = len / chunk;
    let mut out = Tensor::zeros(&[len, heads, d]);
    let mut finals = Vec::with_capacity(heads * d * d);
    for h in 0..heads {
        let mut s = vec![0.0; d * d];
        for t in 0..n_chunks {
            let enter = s.clone();
            let mut run = s.clone();
            let mut decay = 1.0;
            for i in t * chunk..(t + 1) * chunk {
                let a = c.alpha.get(&[i, h]);
                let b = c.beta.get(&[i, h]);
                decay *= a;
                let k: Vec<f64> = (0..d).map(|x| c.k.get(&[i, h, x])).collect();
                let v: Vec<f64> = (0..d).map(|x| c.v.get(&[i, h, x])).collect();
                for row in 0..d {
                    let sk: f64 = (0..d).map(|x| run[row * d + x] * k[x]).sum();
                    for col in 0..d {
                        let cur = run[row * d + col];
                        run[row * d + col] = a * (cur - b * sk * k[col]) + b * v[row] * k[col];
                    }
                }
                for row in 0..d {
                    let o: f64 = (0..d).map(|x| run[row * d + x] * c.q.get(&[i, h, x])).sum();
                    out.set(&[i, h, row], o);
                }
            }
            let g = gates[h * n_chunks + t];
            let base = if decay_base { decay } else { 1.0 };
            for x in 0..d * d {
                let b = base * enter[x];
                s[x] = b + g * (run[x] - b);
            }
        }
        finals.extend_from_slice(&s);
    }
    (out, finals)
}

/// Gates matching a routing: 1 for linear chunks, 0 for softmax chunks.
pub fn gates_of(r: &ChunkRouting<f64>) -> Vec<f64> {
    r.choices()
        .iter()
        .map(|&c| if c == Route::Linear { 1.0 } else { 0.0 })
        .collect()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
