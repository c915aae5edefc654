//! Chunk score layer and argmax routing.
//!
//! `scores[g, t, op] = W_score[:, 2g+op] · mean(X rows of chunk t)`, op 0 is
//! softmax and op 1 is linear. The chosen op is the argmax; ties go to
//! softmax. Routing is discrete, so its backward is straight-through: the
//! chosen op's score receives the path's chunk gradient and the other op's
//! score receives zero.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::numerics::linalg::{axpy, dot};
use crate::numerics::pool::chunk_mean;
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Route {
    Softmax = 0,
    Linear = 1,
}

impl Route {
    pub fn index(self) -> usize {
        self as usize
    }
}

/// Per (group, chunk) routing decision plus the scores behind it.
#[derive(Debug, Clone, PartialEq)]
pub struct ChunkRouting<T> {
    n_groups: usize,
    n_chunks: usize,
    choice: Vec<Route>,
    /// `[n_groups × n_chunks × 2]`; absent when the routing was forced.
    pub scores: Option<Tensor<T>>,
}

impl<T: Real> ChunkRouting<T> {
    pub fn uniform(n_groups: usize, n_chunks: usize, route: Route) -> Self {
        ChunkRouting {
            n_groups,
            n_chunks,
            choice: vec![route; n_groups * n_chunks],
            scores: None,
        }
    }

    pub fn from_choices(n_groups: usize, n_chunks: usize, choice: Vec<Route>) -> Result<Self> {
        if choice.len() != n_groups * n_chunks {
            return Err(Error::shape(
                "routing",
                &[n_groups, n_chunks],
                &[choice.len()],
            ));
        }
        Ok(ChunkRouting {
            n_groups,
            n_chunks,
            choice,
            scores: None,
        })
    }

    /// Routes an evenly spread fraction `p` of chunks to softmax: chunk `t` is
    /// softmax iff `floor((t+1)p) > floor(tp)`. Same pattern for every group.
    pub fn with_fraction(n_groups: usize, n_chunks: usize, p: f64) -> Self {
        let p = p.clamp(0.0, 1.0);
        let per_chunk: Vec<Route> = (0..n_chunks)
            .map(|t| {
                let hi = libm_floor((t + 1) as f64 * p);
                let lo = libm_floor(t as f64 * p);
                if hi > lo {
                    Route::Softmax
                } else {
                    Route::Linear
                }
            })
            .collect();
        let mut choice = Vec::with_capacity(n_groups * n_chunks);
        for _ in 0..n_groups {
            choice.extend_from_slice(&per_chunk);
        }
        ChunkRouting {
            n_groups,
            n_chunks,
            choice,
            scores: None,
        }
    }

    pub fn n_groups(&self) -> usize {
        self.n_groups
    }

    pub fn n_chunks(&self) -> usize {
        self.n_chunks
    }

    #[inline]
    pub fn get(&self, group: usize, chunk: usize) -> Route {
        self.choice[group * self.n_chunks + chunk]
    }

    pub fn choices(&self) -> &[Route] {
        &self.choice
    }

    pub fn count(&self, route: Route) -> usize {
        self.choice.iter().filter(|&&r| r == route).count()
    }

    pub fn softmax_fraction(&self) -> f64 {
        self.count(Route::Softmax) as f64 / self.choice.len().max(1) as f64
    }

    pub fn check_dims(&self, n_groups: usize, n_chunks: usize) -> Result<()> {
        if self.n_groups != n_groups || self.n_chunks != n_chunks {
            return Err(Error::shape(
                "routing",
                &[self.n_groups, self.n_chunks],
                &[n_groups, n_chunks],
            ));
        }
        Ok(())
    }
}

fn libm_floor(x: f64) -> f64 {
    num_traits::Float::floor(x)
}

/// Scores for every (group, chunk, op). `w_score` is `[d_model × 2·n_groups]`.
pub fn compute_scores<T: Real>(
    x: &Tensor<T>,
    w_score: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    chunk: usize,
) -> Result<Tensor<T>> {
    if x.rank() != 2 || w_score.rank() != 2 || w_score.shape()[0] != x.shape()[1] {
        return Err(Error::shape("compute_scores", x.shape(), w_score.shape()));
    }
    let cols = w_score.shape()[1];
    if cols % 2 != 0 {
        return Err(Error::invalid(
            "compute_scores",
            "score columns must be 2 per group",
        ));
    }
    if let Some(b) = bias {
        if b.len() != cols {
            return Err(Error::shape("compute_scores bias", b.shape(), &[cols]));
        }
    }
    let (len, d) = (x.shape()[0], x.shape()[1]);
    if chunk == 0 || len % chunk != 0 {
        return Err(Error::NotDivisible {
            op: "compute_scores",
            len,
            chunk,
        });
    }
    let n_groups = cols / 2;
    let n_chunks = len / chunk;
    let mut scores = Tensor::zeros(&[n_groups, n_chunks, 2]);
    let mut mean = vec![T::zero(); d];
    for t in 0..n_chunks {
        chunk_mean(&x.data()[t * chunk * d..(t + 1) * chunk * d], d, &mut mean);
        let row = score_row(&mean, w_score, bias);
        for c in 0..cols {
            scores.set(&[c / 2, t, c % 2], row[c]);
        }
    }
    Ok(scores)
}

/// `mean · W_score (+ bias)` for one chunk mean; one entry per score column.
pub fn score_row<T: Real>(mean: &[T], w_score: &Tensor<T>, bias: Option<&Tensor<T>>) -> Vec<T> {
    let cols = w_score.shape()[1];
    let mut out = match bias {
        Some(b) => b.data().to_vec(),
        None => vec![T::zero(); cols],
    };
    for (i, &m) in mean.iter().enumerate() {
        axpy(m, &w_score.data()[i * cols..(i + 1) * cols], &mut out);
    }
    out
}

/// Argmax per (group, chunk); a tie routes to softmax.
pub fn route<T: Real>(scores: &Tensor<T>) -> Result<ChunkRouting<T>> {
    if scores.rank() != 3 || scores.shape()[2] != 2 {
        return Err(Error::shape("route", scores.shape(), &[0, 0, 2]));
    }
    let (n_groups, n_chunks) = (scores.shape()[0], scores.shape()[1]);
    let mut choice = Vec::with_capacity(n_groups * n_chunks);
    for g in 0..n_groups {
        for t in 0..n_chunks {
            choice.push(route_one(
                scores.get(&[g, t, 0]),
                scores.get(&[g, t, 1]),
                g,
                t,
            )?);
        }
    }
    Ok(ChunkRouting {
        n_groups,
        n_chunks,
        choice,
        scores: Some(scores.clone()),
    })
}

#[inline]
pub fn route_one<T: Real>(softmax: T, linear: T, group: usize, chunk: usize) -> Result<Route> {
    if softmax.is_nan() || linear.is_nan() {
        return Err(Error::NanScore { group, chunk });
    }
    Ok(if linear > softmax {
        Route::Linear
    } else {
        Route::Softmax
    })
}

/// Straight-through backward of `route(compute_scores(X))`.
///
/// For each (group, chunk) the chosen op's score gradient is `dscore_nla`
/// (softmax chosen) or `dscore_la` (linear chosen); the other op gets zero.
/// `valid` marks chunks that hold real tokens; padded chunks get no
/// gradient. Returns `(dW_score, dX, dbias)`.
pub fn score_backward<T: Real>(
    dscore_nla: &Tensor<T>,
    dscore_la: &Tensor<T>,
    routing: &ChunkRouting<T>,
    x: &Tensor<T>,
    w_score: &Tensor<T>,
    chunk: usize,
    valid: Option<&[bool]>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let n_groups = routing.n_groups();
    let n_chunks = routing.n_chunks();
    if dscore_nla.shape() != [n_groups, n_chunks] || dscore_la.shape() != [n_groups, n_chunks] {
        return Err(Error::shape(
            "score_backward",
            dscore_nla.shape(),
            &[n_groups, n_chunks],
        ));
    }
    if x.rank() != 2
        || x.shape()[0] != n_chunks * chunk
        || w_score.shape() != [x.shape()[1], 2 * n_groups]
    {
        return Err(Error::shape("score_backward", x.shape(), w_score.shape()));
    }
    let d = x.shape()[1];
    let cols = 2 * n_groups;
    let mut dw = Tensor::zeros(w_score.shape());
    let mut dx = Tensor::zeros(x.shape());
    let mut dbias = Tensor::zeros(&[cols]);
    let mut mean = vec![T::zero(); d];
    let mut dscore_row = vec![T::zero(); cols];
    let inv_c = T::one() / T::from_usize(chunk);
    for t in 0..n_chunks {
        if valid.is_some_and(|v| !v[t]) {
            continue;
        }
        let mut any = false;
        for g in 0..n_groups {
            let (s, op) = match routing.get(g, t) {
                Route::Softmax => (dscore_nla.get(&[g, t]), 0),
                Route::Linear => (dscore_la.get(&[g, t]), 1),
            };
            dscore_row[2 * g] = T::zero();
            dscore_row[2 * g + 1] = T::zero();
            dscore_row[2 * g + op] = s;
            any |= s != T::zero();
        }
        if !any {
            continue;
        }
        chunk_mean(&x.data()[t * chunk * d..(t + 1) * chunk * d], d, &mut mean);
        for i in 0..d {
            axpy(
                mean[i],
                &dscore_row,
                &mut dw.data_mut()[i * cols..(i + 1) * cols],
            );
        }
        axpy(T::one(), &dscore_row, dbias.data_mut());
        // d mean = W_score · dscore_row, spread 1/C over the chunk's rows
        let mut dmean = vec![T::zero(); d];
        for i in 0..d {
            dmean[i] = dot(&w_score.data()[i * cols..(i + 1) * cols], &dscore_row) * inv_c;
        }
        for r in t * chunk..(t + 1) * chunk {
            axpy(T::one(), &dmean, dx.row_mut(r));
        }
    }
    Ok((dw, dx, dbias))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::testutil::rng;

    #[test]
    fn zero_weights_tie_to_softmax() {
        let mut r = rng(0);
        let x = Tensor::<f64>::randn(&[8, 3], 1.0, &mut r);
        let w = Tensor::<f64>::zeros(&[3, 4]);
        let s = compute_scores(&x, &w, None, 4).unwrap();
        assert!(s.data().iter().all(|&v| v == 0.0));
        let routing = route(&s).unwrap();
        assert_eq!(routing.count(Route::Softmax), 4);
    }

    #[test]
    fn hand_score() {
        let x = Tensor::<f64>::from_f64(&[2, 2], &[0.0, 1.0, 2.0, 3.0]).unwrap();
        let w = Tensor::<f64>::from_f64(&[2, 2], &[3.0, 0.0, -1.0, 0.0]).unwrap();
        let s = compute_scores(&x, &w, None, 2).unwrap();
        assert_eq!(s.get(&[0, 0, 0]), 1.0);

        let x = Tensor::<f64>::full(&[3, 2], 0.5);
        let w = Tensor::<f64>::from_f64(&[2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        let s = compute_scores(&x, &w, None, 3).unwrap();
        assert_eq!(s.data(), &[2.0, 3.0]);
    }

    #[test]
    fn argmax_and_ties() {
        let s = Tensor::<f64>::from_f64(&[1, 3, 2], &[0.2, 0.7, 0.5, 0.5, 0.9, -1.0]).unwrap();
        let r = route(&s).unwrap();
        assert_eq!(
            r.choices(),
            &[Route::Linear, Route::Softmax, Route::Softmax]
        );

        let nan = Tensor::<f64>::from_f64(&[1, 1, 2], &[f64::NAN, 0.0]).unwrap();
        assert_eq!(route(&nan), Err(Error::NanScore { group: 0, chunk: 0 }));
    }

    #[test]
    fn indivisible_length_is_rejected() {
        let x = Tensor::<f64>::zeros(&[5, 2]);
        let w = Tensor::<f64>::zeros(&[2, 2]);
        assert!(matches!(
            compute_scores(&x, &w, None, 2),
            Err(Error::NotDivisible { .. })
        ));
    }

    #[test]
    fn fraction_pattern() {
        let r = ChunkRouting::<f64>::with_fraction(2, 8, 0.25);
        assert_eq!(r.count(Route::Softmax), 4);
        assert_eq!(r.get(0, 3), Route::Softmax);
        assert_eq!(r.get(1, 7), Route::Softmax);
        assert_eq!(r.get(1, 0), Route::Linear);
        assert_eq!(
            ChunkRouting::<f64>::with_fraction(1, 5, 1.0).count(Route::Softmax),
            5
        );
        assert_eq!(
            ChunkRouting::<f64>::with_fraction(1, 5, 0.0).count(Route::Softmax),
            0
        );
    }

    #[test]
    fn single_chunk_chain_rule() {
        // chunk mean [1, 2]; the chosen (linear) score gets gradient s
        let x = Tensor::<f64>::from_f64(&[2, 2], &[0.0, 1.0, 2.0, 3.0]).unwrap();
        let w = Tensor::<f64>::from_f64(&[2, 2], &[0.0, 3.0, 0.0, -1.0]).unwrap();
        let scores = compute_scores(&x, &w, None, 2).unwrap();
        let routing = route(&scores).unwrap();
        assert_eq!(routing.get(0, 0), Route::Linear);
        let s = 0.7;
        let dn = Tensor::<f64>::from_f64(&[1, 1], &[123.0]).unwrap();
        let dl = Tensor::<f64>::from_f64(&[1, 1], &[s]).unwrap();
        let (dw, dx, db) = score_backward(&dn, &dl, &routing, &x, &w, 2, None).unwrap();
        assert_eq!(dw.data(), &[0.0, s * 1.0, 0.0, s * 2.0]);
        assert_eq!(db.data(), &[0.0, s]);
        for r in 0..2 {
            assert_eq!(dx.row(r), &[s / 2.0 * 3.0, -(s / 2.0)]);
        }
        // padded chunk: nothing flows
        let (dw, dx, _) = score_backward(&dn, &dl, &routing, &x, &w, 2, Some(&[false])).unwrap();
        assert_eq!(dw.max_abs(), 0.0);
        assert_eq!(dx.max_abs(), 0.0);
    }
}
