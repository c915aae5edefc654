//! Chunked causal softmax attention under a column-wise routing mask.
//!
//! Keys are visited one chunk at a time with an online log-sum-exp. A key
//! chunk strictly before the query chunk is visited only if it is active for
//! the head's group; the query's own chunk is always visited (causally), since
//! its routing is decided only once the chunk is complete. Inactive chunks
//! are skipped outright, never loaded.
//!
//! The backward recomputes probabilities from the saved log-sum-exp. Its
//! logit gradient `P(dP − dO·O)` is also the gradient of a continuous mask
//! entry, so the per-chunk routing gradient is the column sum of that
//! quantity over strictly-earlier active chunks, accumulated inline.

pub mod rope;

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::numerics::linalg::{axpy, dot};
use crate::real::Real;
use crate::router::{ChunkRouting, Route};
use crate::tensor::{check_finite, Tensor};

pub use rope::{rope_apply, rope_backward};

/// Which key chunks each head group may see.
///
/// Dense equivalent: `M[i,j] = 1` iff `chunk(j) < chunk(i)` and the chunk is
/// active for the group, or `chunk(j) == chunk(i)` and `j ≤ i`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ColumnMask {
    n_groups: usize,
    n_chunks: usize,
    chunk: usize,
    active: Vec<bool>,
    /// Off only for the ablation that drops same-chunk softmax correlations.
    pub diagonal: bool,
}

impl ColumnMask {
    pub fn new(n_groups: usize, n_chunks: usize, chunk: usize, active: Vec<bool>) -> Result<Self> {
        if active.len() != n_groups * n_chunks || chunk == 0 {
            return Err(Error::shape(
                "column_mask",
                &[n_groups, n_chunks],
                &[active.len()],
            ));
        }
        Ok(ColumnMask {
            n_groups,
            n_chunks,
            chunk,
            active,
            diagonal: true,
        })
    }

    pub fn all_active(n_groups: usize, n_chunks: usize, chunk: usize) -> Self {
        ColumnMask {
            n_groups,
            n_chunks,
            chunk,
            active: vec![true; n_groups * n_chunks],
            diagonal: true,
        }
    }

    /// Softmax-routed chunks are active.
    pub fn from_routing<T: Real>(routing: &ChunkRouting<T>, chunk: usize) -> Self {
        ColumnMask {
            n_groups: routing.n_groups(),
            n_chunks: routing.n_chunks(),
            chunk,
            active: routing
                .choices()
                .iter()
                .map(|&r| r == Route::Softmax)
                .collect(),
            diagonal: true,
        }
    }

    pub fn n_groups(&self) -> usize {
        self.n_groups
    }

    pub fn n_chunks(&self) -> usize {
        self.n_chunks
    }

    pub fn chunk(&self) -> usize {
        self.chunk
    }

    #[inline]
    pub fn is_active(&self, group: usize, chunk: usize) -> bool {
        self.active[group * self.n_chunks + chunk]
    }

    /// Whether query chunk `qc` reads key chunk `kc` for `group`.
    #[inline]
    pub fn block_visible(&self, group: usize, qc: usize, kc: usize) -> bool {
        match kc.cmp(&qc) {
            core::cmp::Ordering::Less => self.is_active(group, kc),
            core::cmp::Ordering::Equal => self.diagonal,
            core::cmp::Ordering::Greater => false,
        }
    }

    /// Dense mask entry.
    pub fn visible(&self, group: usize, i: usize, j: usize) -> bool {
        j <= i && self.block_visible(group, i / self.chunk, j / self.chunk)
    }

    fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for &a in &self.active {
            h = (h ^ a as u64).wrapping_mul(0x100_0000_01b3);
        }
        h ^ ((self.diagonal as u64) << 63) ^ (self.chunk as u64)
    }
}

/// Running state of one query row across key blocks.
#[derive(Debug, Clone)]
pub struct OnlineRow<T> {
    pub max: T,
    pub sum: T,
    pub acc: Vec<T>,
}

impl<T: Real> OnlineRow<T> {
    pub fn new(d: usize) -> Self {
        OnlineRow {
            max: T::neg_infinity(),
            sum: T::zero(),
            acc: vec![T::zero(); d],
        }
    }

    /// Folds `n` keys/values into the row. Key/value row `j` starts at
    /// `base + j·stride` in `k`/`v`. `scores` is scratch of length ≥ `n`.
    #[inline]
    pub fn absorb(
        &mut self,
        q: &[T],
        k: &[T],
        v: &[T],
        base: usize,
        stride: usize,
        n: usize,
        scale: T,
        scores: &mut [T],
    ) {
        let d = q.len();
        let mut block_max = T::neg_infinity();
        for j in 0..n {
            let o = base + j * stride;
            let s = dot(q, &k[o..o + d]) * scale;
            scores[j] = s;
            if s > block_max {
                block_max = s;
            }
        }
        let new_max = if block_max > self.max {
            block_max
        } else {
            self.max
        };
        if self.max != T::neg_infinity() && self.max != new_max {
            let corr = (self.max - new_max).exp();
            self.sum *= corr;
            for a in self.acc.iter_mut() {
                *a *= corr;
            }
        }
        for j in 0..n {
            let p = (scores[j] - new_max).exp();
            self.sum += p;
            let o = base + j * stride;
            axpy(p, &v[o..o + d], &mut self.acc);
        }
        self.max = new_max;
    }

    /// Normalized output and log-sum-exp; a row that saw nothing yields
    /// zeros and `-inf`.
    pub fn finish(&self, out: &mut [T]) -> T {
        if self.sum == T::zero() {
            out.fill(T::zero());
            return T::neg_infinity();
        }
        let inv = T::one() / self.sum;
        for (o, &a) in out.iter_mut().zip(&self.acc) {
            *o = a * inv;
        }
        self.max + self.sum.ln()
    }
}

/// Forward state kept for the backward pass.
#[derive(Debug, Clone)]
pub struct AttnSaved<T> {
    pub out: Tensor<T>,
    /// `[L × h]` log-sum-exp per query row.
    pub lse: Vec<T>,
    /// Multiply-adds performed (QKᵀ and PV).
    pub macs: u64,
    fingerprint: u64,
}

#[derive(Debug, Clone)]
pub struct AttnGrads<T> {
    pub dq: Tensor<T>,
    pub dk: Tensor<T>,
    pub dv: Tensor<T>,
    /// `[n_groups × n_chunks]` routing gradient of the softmax path.
    pub dscore: Tensor<T>,
    /// `[h × L × L]` per-entry mask gradient when requested.
    pub mask_grad: Option<Tensor<T>>,
    pub macs: u64,
}

fn check_inputs<T: Real>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    mask: &ColumnMask,
    group_of_head: &[usize],
) -> Result<(usize, usize, usize)> {
    if q.rank() != 3 || k.shape() != q.shape() || v.shape() != q.shape() {
        return Err(Error::shape("masked_attention", q.shape(), k.shape()));
    }
    let (len, heads, d) = (q.shape()[0], q.shape()[1], q.shape()[2]);
    if mask.n_chunks * mask.chunk != len {
        return Err(Error::NotDivisible {
            op: "masked_attention",
            len,
            chunk: mask.chunk,
        });
    }
    if group_of_head.len() != heads || group_of_head.iter().any(|&g| g >= mask.n_groups) {
        return Err(Error::invalid(
            "masked_attention",
            "group_of_head does not match the mask",
        ));
    }
    Ok((len, heads, d))
}

/// `O = softmax_M(QKᵀ/√d) V` per head, `Q, K, V: [L × h × d]`.
pub fn masked_attention_forward<T: Real>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    mask: &ColumnMask,
    group_of_head: &[usize],
) -> Result<(Tensor<T>, AttnSaved<T>)> {
    let (len, heads, d) = check_inputs(q, k, v, mask, group_of_head)?;
    let c = mask.chunk;
    let scale = T::one() / T::from_usize(d).sqrt();
    let stride = heads * d;
    let mut out = Tensor::zeros(q.shape());
    let mut lse = vec![T::zero(); len * heads];
    let mut scores = vec![T::zero(); c];
    let mut macs = 0u64;
    for h in 0..heads {
        let g = group_of_head[h];
        for i in 0..len {
            let qc = i / c;
            let qrow = &q.data()[(i * heads + h) * d..(i * heads + h + 1) * d];
            let mut st = OnlineRow::new(d);
            for kc in 0..=qc {
                if !mask.block_visible(g, qc, kc) {
                    continue;
                }
                let n = if kc == qc { i - kc * c + 1 } else { c };
                st.absorb(
                    qrow,
                    k.data(),
                    v.data(),
                    (kc * c * heads + h) * d,
                    stride,
                    n,
                    scale,
                    &mut scores,
                );
                macs += 2 * (n * d) as u64;
            }
            lse[i * heads + h] =
                st.finish(&mut out.data_mut()[(i * heads + h) * d..(i * heads + h + 1) * d]);
        }
    }
    check_finite("masked_attention_forward", out.data())?;
    Ok((
        out.clone(),
        AttnSaved {
            out,
            lse,
            macs,
            fingerprint: mask.fingerprint(),
        },
    ))
}

/// Exact gradients of [`masked_attention_forward`] plus the routing gradient.
pub fn masked_attention_backward<T: Real>(
    d_out: &Tensor<T>,
    saved: &AttnSaved<T>,
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    mask: &ColumnMask,
    group_of_head: &[usize],
    capture_mask_grad: bool,
) -> Result<AttnGrads<T>> {
    let (len, heads, d) = check_inputs(q, k, v, mask, group_of_head)?;
    if d_out.shape() != q.shape() {
        return Err(Error::shape(
            "masked_attention_backward",
            d_out.shape(),
            q.shape(),
        ));
    }
    if saved.out.shape() != q.shape() || saved.fingerprint != mask.fingerprint() {
        return Err(Error::StaleState(
            "attention saved state was produced under another mask or shape",
        ));
    }
    let c = mask.chunk;
    let scale = T::one() / T::from_usize(d).sqrt();
    let mut dq = Tensor::zeros(q.shape());
    let mut dk = Tensor::zeros(q.shape());
    let mut dv = Tensor::zeros(q.shape());
    let mut dscore = Tensor::zeros(&[mask.n_groups, mask.n_chunks]);
    let mut mask_grad = capture_mask_grad.then(|| Tensor::zeros(&[heads, len, len]));
    let mut macs = 0u64;
    let (qd, kd, vd, od, dod) = (q.data(), k.data(), v.data(), saved.out.data(), d_out.data());
    let row = |i: usize, h: usize| (i * heads + h) * d..(i * heads + h + 1) * d;

    for h in 0..heads {
        let g = group_of_head[h];
        for i in 0..len {
            let lse_i = saved.lse[i * heads + h];
            if lse_i == T::neg_infinity() {
                continue;
            }
            let qc = i / c;
            let (qi, doi) = (&qd[row(i, h)], &dod[row(i, h)]);
            let delta = dot(doi, &od[row(i, h)]);
            let mut dqi = vec![T::zero(); d];
            for kc in 0..=qc {
                if !mask.block_visible(g, qc, kc) {
                    continue;
                }
                let end = if kc == qc { i + 1 } else { (kc + 1) * c };
                let mut col_sum = T::zero();
                for j in kc * c..end {
                    let kj = &kd[row(j, h)];
                    let p = (dot(qi, kj) * scale - lse_i).exp();
                    let dp = dot(doi, &vd[row(j, h)]);
                    let ds = p * (dp - delta);
                    axpy(p, doi, &mut dv.data_mut()[row(j, h)]);
                    axpy(ds * scale, kj, &mut dqi);
                    axpy(ds * scale, qi, &mut dk.data_mut()[row(j, h)]);
                    col_sum += ds;
                    if let Some(mg) = mask_grad.as_mut() {
                        mg.data_mut()[(h * len + i) * len + j] = ds;
                    }
                }
                macs += 5 * ((end - kc * c) * d) as u64;
                if kc < qc {
                    dscore.data_mut()[g * mask.n_chunks + kc] += col_sum;
                }
            }
            axpy(T::one(), &dqi, &mut dq.data_mut()[row(i, h)]);
        }
    }
    Ok(AttnGrads {
        dq,
        dk,
        dv,
        dscore,
        mask_grad,
        macs,
    })
}
